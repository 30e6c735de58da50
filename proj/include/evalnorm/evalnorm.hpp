#pragma once

#include "evalnorm/errors.hpp"
#include "evalnorm/tensor.hpp"
#include "evalnorm/autodiff.hpp"
#include "evalnorm/moments.hpp"
#include "evalnorm/normalization.hpp"
#include "evalnorm/en_params.hpp"
#include "evalnorm/model.hpp"
#include "evalnorm/data.hpp"
#include "evalnorm/estimator.hpp"
#include "evalnorm/text.hpp"
#include "evalnorm/config.hpp"
#include "evalnorm/checkpoint.hpp"
#include "evalnorm/harness.hpp"
#include "evalnorm/report.hpp"
