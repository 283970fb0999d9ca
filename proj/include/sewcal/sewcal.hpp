#pragma once

#include "sewcal/core.hpp"
#include "sewcal/data_synth.hpp"
#include "sewcal/autodiff.hpp"
#include "sewcal/params.hpp"
#include "sewcal/encoders.hpp"
#include "sewcal/sew_loss.hpp"
#include "sewcal/mcm.hpp"
#include "sewcal/trainer.hpp"
#include "sewcal/eval.hpp"
#include "sewcal/grad_check.hpp"
#include "sewcal/config.hpp"
