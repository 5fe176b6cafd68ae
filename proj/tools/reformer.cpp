// Copyright 2026 The reformer-cpp Authors.
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "reformer/cli.hpp"

int main(int argc, char** argv) {
  return reformer::run_cli(argc, argv, std::cout, std::cerr);
}
