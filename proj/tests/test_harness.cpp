#include <gtest/gtest.h>
TEST(Placeholder, Harness) {}
