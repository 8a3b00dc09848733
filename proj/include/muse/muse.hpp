#pragma once

#include "muse/tensor.hpp"
#include "muse/tape.hpp"
#include "muse/ops.hpp"
#include "muse/grad_check.hpp"
#include "muse/random.hpp"
#include "muse/nn.hpp"
#include "muse/crosstransformer.hpp"
#include "muse/codec.hpp"
#include "muse/heads.hpp"
#include "muse/data.hpp"
#include "muse/model.hpp"
#include "muse/harness.hpp"
