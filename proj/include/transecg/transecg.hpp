#pragma once

#include "transecg/log.hpp"
#include "transecg/signal.hpp"
#include "transecg/delineation.hpp"
#include "transecg/tensor.hpp"
#include "transecg/optim.hpp"
#include "transecg/param_io.hpp"
#include "transecg/vit.hpp"
#include "transecg/data_io.hpp"
#include "transecg/training.hpp"
#include "transecg/explain.hpp"
#include "transecg/pipeline.hpp"
