// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "transcrowd/tensor.hpp"
#include "transcrowd/rng.hpp"
#include "transcrowd/gradcheck.hpp"
#include "transcrowd/image.hpp"
#include "transcrowd/synth.hpp"
#include "transcrowd/config.hpp"
#include "transcrowd/embedder.hpp"
#include "transcrowd/encoder.hpp"
#include "transcrowd/heads.hpp"
#include "transcrowd/model.hpp"
#include "transcrowd/optim.hpp"
#include "transcrowd/checkpoint.hpp"
#include "transcrowd/eval.hpp"
#include "transcrowd/run_config.hpp"
#include "transcrowd/cli.hpp"
