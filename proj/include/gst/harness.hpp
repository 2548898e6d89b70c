#pragma once

#include "gst/harness/checkpoint.hpp"
#include "gst/harness/config.hpp"
#include "gst/harness/eval.hpp"
#include "gst/harness/metrics.hpp"
#include "gst/harness/train.hpp"
