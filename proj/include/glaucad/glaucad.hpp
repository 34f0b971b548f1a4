#pragma once

#include "glaucad/adam.hpp"
#include "glaucad/dataset.hpp"
#include "glaucad/error.hpp"
#include "glaucad/gradcam.hpp"
#include "glaucad/image.hpp"
#include "glaucad/metrics.hpp"
#include "glaucad/model.hpp"
#include "glaucad/ops.hpp"
#include "glaucad/preprocess.hpp"
#include "glaucad/rng.hpp"
#include "glaucad/synthetic.hpp"
#include "glaucad/tensor.hpp"
#include "glaucad/training.hpp"
#include "glaucad/weights_io.hpp"
