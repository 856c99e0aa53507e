// Copyright 2026 The flythinker Authors.
// SPDX-License-Identifier: Apache-2.0

#include "flythinker/cli.hpp"

int main(int argc, char** argv) { return flythinker::run_cli(argc, argv); }
