#pragma once

#include "fcal/errors.hpp"
#include "fcal/rng.hpp"
#include "fcal/kernel.hpp"
#include "fcal/data.hpp"
#include "fcal/model.hpp"
#include "fcal/optimize.hpp"
#include "fcal/band.hpp"
#include "fcal/calibrate.hpp"
#include "fcal/select.hpp"
#include "fcal/uq.hpp"
#include "fcal/baselines.hpp"
#include "fcal/emulator.hpp"
#include "fcal/bench.hpp"
#include "fcal/io.hpp"
