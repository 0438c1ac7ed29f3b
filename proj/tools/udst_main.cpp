// Copyright 2026 The udst Authors
// SPDX-License-Identifier: Apache-2.0

#include <string>
#include <vector>

#include "udst/pipeline.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return udst::cmd(args);
}
