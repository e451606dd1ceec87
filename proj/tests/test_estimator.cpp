#include <gtest/gtest.h>
TEST(Placeholder, Estimator) {}
