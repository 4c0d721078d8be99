#pragma once

#include "miso/analysis.hpp"
#include "miso/attention.hpp"
#include "miso/checkpoint.hpp"
#include "miso/datagen.hpp"
#include "miso/model.hpp"
#include "miso/numerics.hpp"
#include "miso/tokenizer.hpp"
#include "miso/training.hpp"
