#pragma once

#include <gtest/gtest.h>

#include <functional>

#include "dnt/error.hpp"

namespace dnt::testing {

inline void expect_kind(ErrorKind kind, const std::function<void()>& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

}  // namespace dnt::testing
