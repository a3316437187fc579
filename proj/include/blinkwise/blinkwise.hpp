#pragma once

#include "blinkwise/blink_detector.hpp"
#include "blinkwise/blink_features.hpp"
#include "blinkwise/crossvalidate.hpp"
#include "blinkwise/errors.hpp"
#include "blinkwise/evaluation.hpp"
#include "blinkwise/landmark_io.hpp"
#include "blinkwise/model_io.hpp"
#include "blinkwise/sequence_model.hpp"
#include "blinkwise/synthetic.hpp"
#include "blinkwise/text.hpp"
#include "blinkwise/training.hpp"
