#pragma once

#include "anchorlab/anchor.hpp"
#include "anchorlab/dynamics.hpp"
#include "anchorlab/env.hpp"
#include "anchorlab/error.hpp"
#include "anchorlab/experiment.hpp"
#include "anchorlab/gradcheck.hpp"
#include "anchorlab/gradients.hpp"
#include "anchorlab/metrics.hpp"
#include "anchorlab/objectives.hpp"
#include "anchorlab/policy.hpp"
#include "anchorlab/rng.hpp"
#include "anchorlab/trainer.hpp"
