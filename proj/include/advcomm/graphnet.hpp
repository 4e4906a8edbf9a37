#pragma once

#include "advcomm/graphnet/conv.hpp"
#include "advcomm/graphnet/shift.hpp"
