#pragma once

#include "shiftadd/error.hpp"
#include "shiftadd/matrix.hpp"
#include "shiftadd/pot_scale.hpp"
#include "shiftadd/bitplane.hpp"
#include "shiftadd/bcq.hpp"
#include "shiftadd/tensor_store.hpp"
#include "shiftadd/hessian.hpp"
#include "shiftadd/reparam.hpp"
#include "shiftadd/lut_engine.hpp"
#include "shiftadd/bit_alloc.hpp"
#include "shiftadd/cost_model.hpp"
#include "shiftadd/synth.hpp"
#include "shiftadd/pipeline.hpp"
