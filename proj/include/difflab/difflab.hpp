// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "difflab/core.hpp"
#include "difflab/denoiser.hpp"
#include "difflab/infotheory.hpp"
#include "difflab/io.hpp"
#include "difflab/losses.hpp"
#include "difflab/mc.hpp"
#include "difflab/monotone.hpp"
#include "difflab/noising.hpp"
#include "difflab/odelik.hpp"
#include "difflab/optim.hpp"
#include "difflab/oracle.hpp"
#include "difflab/rng.hpp"
#include "difflab/samplers.hpp"
#include "difflab/scalingfit.hpp"
#include "difflab/schedule.hpp"
#include "difflab/trainer.hpp"
#include "difflab/verify.hpp"
