#pragma once

#include "rope/common.hpp"
#include "rope/mdp.hpp"
#include "rope/dataset.hpp"
#include "rope/metric.hpp"
#include "rope/aggregation.hpp"
#include "rope/nn.hpp"
#include "rope/training.hpp"
#include "rope/encoder.hpp"
#include "rope/fqe.hpp"
#include "rope/config.hpp"
#include "rope/eval.hpp"
#include "rope/io.hpp"
