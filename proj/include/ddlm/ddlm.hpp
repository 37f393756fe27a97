#pragma once

#include "bench.hpp"
#include "bench_record.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "corruption.hpp"
#include "error.hpp"
#include "model.hpp"
#include "objectives.hpp"
#include "optimizer.hpp"
#include "pipeline.hpp"
#include "rng.hpp"
#include "sampler.hpp"
#include "schedule.hpp"
#include "verifier.hpp"
#include "vocab.hpp"
