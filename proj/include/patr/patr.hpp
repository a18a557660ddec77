#pragma once

// Umbrella header.

#include "patr/dataio.hpp"
#include "patr/diffcore.hpp"
#include "patr/error.hpp"
#include "patr/evalret.hpp"
#include "patr/loss.hpp"
#include "patr/mining.hpp"
#include "patr/textenc.hpp"
#include "patr/trainer.hpp"
