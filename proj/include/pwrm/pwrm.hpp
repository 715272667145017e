#pragma once

#include "pwrm/baselines.hpp"
#include "pwrm/dataset.hpp"
#include "pwrm/errors.hpp"
#include "pwrm/mixture.hpp"
#include "pwrm/piecewise.hpp"
#include "pwrm/pwrm_cem.hpp"
#include "pwrm/pwrm_em.hpp"
#include "pwrm/selection.hpp"
