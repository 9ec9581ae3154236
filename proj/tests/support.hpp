#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <string>

#include "visionlogic/tensorio.hpp"

namespace vltest {

namespace fs = std::filesystem;

inline fs::path fixture_dir() { return fs::path(VL_FIXTURE_DIR); }
inline fs::path relu_bundle() { return fixture_dir() / "relu_bundle"; }
inline fs::path gelu_bundle() { return fixture_dir() / "gelu_bundle"; }

/// Fresh, empty scratch directory unique to the running test.
inline fs::path scratch_dir(const std::string& tag = "") {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  std::string name = std::string(info->test_suite_name()) + "_" + info->name() + tag;
  const auto dir = fs::temp_directory_path() / "visionlogic_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Copy of the ReLU fixture bundle that a test may corrupt.
inline fs::path copy_bundle(const fs::path& src, const std::string& tag = "") {
  const auto dst = scratch_dir(tag) / "bundle";
  fs::copy(src, dst, fs::copy_options::recursive);
  return dst;
}

inline const visionlogic::TeacherBundle& relu() {
  static const auto b = visionlogic::load_bundle(relu_bundle());
  return b;
}
inline const visionlogic::TeacherBundle& gelu() {
  static const auto b = visionlogic::load_bundle(gelu_bundle());
  return b;
}

}  // namespace vltest
