#pragma once

#include "dnat/checkpoint.hpp"
#include "dnat/config.hpp"
#include "dnat/data.hpp"
#include "dnat/diffusion.hpp"
#include "dnat/error.hpp"
#include "dnat/metrics.hpp"
#include "dnat/model.hpp"
#include "dnat/optim.hpp"
#include "dnat/parallel.hpp"
#include "dnat/rng.hpp"
#include "dnat/sampler.hpp"
#include "dnat/schedule.hpp"
#include "dnat/tape.hpp"
#include "dnat/trainer.hpp"
#include "dnat/verify.hpp"
#include "dnat/vocab.hpp"
