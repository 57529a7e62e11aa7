#pragma once

#include "adaptsp/adjust.hpp"
#include "adaptsp/digest.hpp"
#include "adaptsp/embedding_store.hpp"
#include "adaptsp/error.hpp"
#include "adaptsp/matrix.hpp"
#include "adaptsp/npy.hpp"
#include "adaptsp/numerics.hpp"
#include "adaptsp/report.hpp"
#include "adaptsp/residuals.hpp"
#include "adaptsp/subspace.hpp"
