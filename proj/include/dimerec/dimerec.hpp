#pragma once

#include "dimerec/checkpoint.hpp"
#include "dimerec/config.hpp"
#include "dimerec/dam.hpp"
#include "dimerec/datapipe.hpp"
#include "dimerec/diffusion.hpp"
#include "dimerec/error.hpp"
#include "dimerec/evaluation.hpp"
#include "dimerec/gem.hpp"
#include "dimerec/inference.hpp"
#include "dimerec/model.hpp"
#include "dimerec/numerics/ops.hpp"
#include "dimerec/numerics/tape.hpp"
#include "dimerec/numerics/tensor.hpp"
#include "dimerec/rng.hpp"
#include "dimerec/store.hpp"
#include "dimerec/synthetic.hpp"
#include "dimerec/trainer.hpp"
