#pragma once

#include "flip/checkpoint.hpp"
#include "flip/config.hpp"
#include "flip/datagen.hpp"
#include "flip/error.hpp"
#include "flip/geometry.hpp"
#include "flip/gradcheck.hpp"
#include "flip/image.hpp"
#include "flip/inference.hpp"
#include "flip/model.hpp"
#include "flip/nn.hpp"
#include "flip/pipeline.hpp"
#include "flip/rng.hpp"
#include "flip/sampler.hpp"
#include "flip/training.hpp"
