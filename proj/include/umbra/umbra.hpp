#pragma once

#include "umbra/audio.hpp"
#include "umbra/common.hpp"
#include "umbra/denoiser.hpp"
#include "umbra/eval.hpp"
#include "umbra/flow.hpp"
#include "umbra/text.hpp"
#include "umbra/trainer.hpp"
#include "umbra/triplet.hpp"
