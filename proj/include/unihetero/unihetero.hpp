#pragma once

#include "unihetero/core/ops.hpp"
#include "unihetero/core/optim.hpp"
#include "unihetero/core/layers.hpp"
#include "unihetero/backbone.hpp"
#include "unihetero/projectors.hpp"
#include "unihetero/pixel_decoder.hpp"
#include "unihetero/toyworld.hpp"
#include "unihetero/model.hpp"
#include "unihetero/checkpoint.hpp"
#include "unihetero/sequences.hpp"
#include "unihetero/inference.hpp"
#include "unihetero/eval.hpp"
#include "unihetero/trainer.hpp"
#include "unihetero/runs.hpp"
