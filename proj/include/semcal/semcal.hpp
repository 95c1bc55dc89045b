#pragma once

#include "semcal/calibrator.hpp"
#include "semcal/error.hpp"
#include "semcal/experiment.hpp"
#include "semcal/frame.hpp"
#include "semcal/geometry.hpp"
#include "semcal/initializer.hpp"
#include "semcal/io.hpp"
#include "semcal/mine.hpp"
#include "semcal/sampling.hpp"
#include "semcal/synth.hpp"
