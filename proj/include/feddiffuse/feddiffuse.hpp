#pragma once

#include "feddiffuse/checkpoint.hpp"
#include "feddiffuse/dataset.hpp"
#include "feddiffuse/diffusion.hpp"
#include "feddiffuse/errors.hpp"
#include "feddiffuse/evaluation.hpp"
#include "feddiffuse/experiment.hpp"
#include "feddiffuse/federation.hpp"
#include "feddiffuse/fixture.hpp"
#include "feddiffuse/layers.hpp"
#include "feddiffuse/model.hpp"
#include "feddiffuse/optimizer.hpp"
#include "feddiffuse/partition.hpp"
#include "feddiffuse/rng.hpp"
#include "feddiffuse/schedule.hpp"
#include "feddiffuse/tensor.hpp"
