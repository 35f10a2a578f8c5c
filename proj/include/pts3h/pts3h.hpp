#pragma once

#include "pts3h/matrix.hpp"
#include "pts3h/binary_io.hpp"
#include "pts3h/encoder.hpp"
#include "pts3h/losses.hpp"
#include "pts3h/retrieval.hpp"
#include "pts3h/data.hpp"
#include "pts3h/trainer.hpp"
#include "pts3h/experiment.hpp"
