// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rapsg/clip_guidance.hpp"
#include "rapsg/config.hpp"
#include "rapsg/embedding_store.hpp"
#include "rapsg/fluency_filter.hpp"
#include "rapsg/grouping.hpp"
#include "rapsg/metrics.hpp"
#include "rapsg/pipeline.hpp"
#include "rapsg/retrieval.hpp"
#include "rapsg/summarization.hpp"
#include "rapsg/text.hpp"
