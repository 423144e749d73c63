// Copyright 2026 The miub-scaling Authors
// SPDX-License-Identifier: Apache-2.0

#include <iostream>

#include "miub/cli.hpp"

int main(int argc, char** argv) { return miub::cli::run(argc, argv, std::cout, std::cerr); }
