#pragma once

#include "reasonrec/checkpoint.hpp"
#include "reasonrec/common.hpp"
#include "reasonrec/corpus.hpp"
#include "reasonrec/eval.hpp"
#include "reasonrec/model.hpp"
#include "reasonrec/objective.hpp"
#include "reasonrec/optimizer.hpp"
#include "reasonrec/params.hpp"
#include "reasonrec/reward.hpp"
#include "reasonrec/run.hpp"
#include "reasonrec/sampler.hpp"
#include "reasonrec/tokenizer.hpp"
#include "reasonrec/trainer.hpp"
#include "reasonrec/transformer.hpp"
