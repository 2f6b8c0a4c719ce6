#pragma once

#include "dslrec/common.hpp"
#include "dslrec/cost.hpp"
#include "dslrec/dataset.hpp"
#include "dslrec/embedding.hpp"
#include "dslrec/evaluation.hpp"
#include "dslrec/experiments.hpp"
#include "dslrec/exploration.hpp"
#include "dslrec/models.hpp"
#include "dslrec/trainer.hpp"
