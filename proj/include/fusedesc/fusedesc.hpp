#pragma once

#include "fusedesc/autodiff.hpp"
#include "fusedesc/binary_codec.hpp"
#include "fusedesc/dataset.hpp"
#include "fusedesc/dct.hpp"
#include "fusedesc/errors.hpp"
#include "fusedesc/evaluation.hpp"
#include "fusedesc/image_io.hpp"
#include "fusedesc/network.hpp"
#include "fusedesc/parameters.hpp"
#include "fusedesc/pipeline.hpp"
#include "fusedesc/preprocess.hpp"
#include "fusedesc/rng.hpp"
#include "fusedesc/tensor.hpp"
#include "fusedesc/training.hpp"
