#pragma once

// Umbrella header.

#include "srm/a2m.hpp"
#include "srm/audio.hpp"
#include "srm/codec.hpp"
#include "srm/config.hpp"
#include "srm/diffusion.hpp"
#include "srm/emotion.hpp"
#include "srm/image_io.hpp"
#include "srm/losses.hpp"
#include "srm/metrics.hpp"
#include "srm/nn.hpp"
#include "srm/pipeline.hpp"
#include "srm/predictors.hpp"
#include "srm/random.hpp"
#include "srm/serialize.hpp"
#include "srm/synth.hpp"
#include "srm/tensor.hpp"
