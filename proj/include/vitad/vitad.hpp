#pragma once

#include "vitad/archive.hpp"
#include "vitad/autodiff.hpp"
#include "vitad/config.hpp"
#include "vitad/dataset.hpp"
#include "vitad/errors.hpp"
#include "vitad/grad_check.hpp"
#include "vitad/image_ops.hpp"
#include "vitad/meta_ad.hpp"
#include "vitad/metrics.hpp"
#include "vitad/optim.hpp"
#include "vitad/params.hpp"
#include "vitad/pnm.hpp"
#include "vitad/rng.hpp"
#include "vitad/scoring.hpp"
#include "vitad/synth.hpp"
#include "vitad/tensor.hpp"
#include "vitad/train.hpp"
#include "vitad/vit.hpp"
