#pragma once

#include "diffwave/audio.hpp"
#include "diffwave/autograd.hpp"
#include "diffwave/classifier.hpp"
#include "diffwave/config.hpp"
#include "diffwave/diffusion.hpp"
#include "diffwave/error.hpp"
#include "diffwave/gradcheck.hpp"
#include "diffwave/metrics.hpp"
#include "diffwave/model.hpp"
#include "diffwave/rng.hpp"
#include "diffwave/sampler.hpp"
#include "diffwave/schedule.hpp"
#include "diffwave/serialize.hpp"
#include "diffwave/tensor.hpp"
#include "diffwave/trainer.hpp"
