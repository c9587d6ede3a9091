#pragma once

#include "cgd/common.hpp"
#include "cgd/corpus.hpp"
#include "cgd/metrics.hpp"
#include "cgd/subprocess.hpp"
#include "cgd/encoder.hpp"
#include "cgd/ci_core.hpp"
#include "cgd/constrain.hpp"
#include "cgd/cause_id.hpp"
#include "cgd/generators.hpp"
#include "cgd/dialogue_pipeline.hpp"
#include "cgd/perturbation.hpp"
#include "cgd/synthetic.hpp"
