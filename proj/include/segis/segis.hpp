#pragma once

// Umbrella header.

#include "adam.hpp"
#include "checkpoint.hpp"
#include "evaluate.hpp"
#include "gradcheck.hpp"
#include "io.hpp"
#include "layers.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "synth.hpp"
#include "trainer.hpp"
#include "volume.hpp"
#include "warp.hpp"
