#pragma once

#include "mtcate/aggregate.hpp"
#include "mtcate/benchmark.hpp"
#include "mtcate/causal_forest.hpp"
#include "mtcate/cate.hpp"
#include "mtcate/data.hpp"
#include "mtcate/forest.hpp"
#include "mtcate/interpret.hpp"
#include "mtcate/lasso.hpp"
#include "mtcate/meta.hpp"
#include "mtcate/ols.hpp"
#include "mtcate/serialize.hpp"
#include "mtcate/simulate.hpp"
#include "mtcate/tree.hpp"
