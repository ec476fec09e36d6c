#pragma once

#include "mvlab/autodiff.hpp"
#include "mvlab/datasets.hpp"
#include "mvlab/encoder.hpp"
#include "mvlab/error.hpp"
#include "mvlab/evaluation.hpp"
#include "mvlab/losses.hpp"
#include "mvlab/maxsim.hpp"
#include "mvlab/maxsim_kernel.hpp"
#include "mvlab/parallel.hpp"
#include "mvlab/pipeline.hpp"
#include "mvlab/rng.hpp"
#include "mvlab/tensor.hpp"
#include "mvlab/tokenizer.hpp"
#include "mvlab/trainer.hpp"
