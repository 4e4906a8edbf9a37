#pragma once

#include "advcomm/diffcore/grad_check.hpp"
#include "advcomm/diffcore/init.hpp"
#include "advcomm/diffcore/ops.hpp"
#include "advcomm/diffcore/optimizer.hpp"
#include "advcomm/diffcore/param_tree.hpp"
#include "advcomm/diffcore/tape.hpp"
#include "advcomm/diffcore/tensor.hpp"
