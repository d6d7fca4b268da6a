#pragma once

// Umbrella header for the PS-ViT library.

#include "psvit/backbone.hpp"
#include "psvit/checkpoint.hpp"
#include "psvit/data.hpp"
#include "psvit/gradcheck.hpp"
#include "psvit/model.hpp"
#include "psvit/ops.hpp"
#include "psvit/optim.hpp"
#include "psvit/sampling.hpp"
#include "psvit/tape.hpp"
#include "psvit/tensor.hpp"
#include "psvit/train.hpp"
#include "psvit/transformer.hpp"
#include "psvit/viz.hpp"
