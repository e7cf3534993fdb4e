#pragma once

#include <string>

#include "ctxbias/pipeline/config.hpp"

namespace ctxbias::pipeline {

// Each command reads its inputs from cfg.paths, writes artifacts under the
// same root, and throws: config_error (exit 2), pipeline_error for missing
// upstream artifacts (exit 3), numeric_error and the rest (exit 4).
void cmd_synth(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_eval(const RunConfig& cfg);
void cmd_q1_image(const RunConfig& cfg);
void cmd_q1_feature(const RunConfig& cfg);
void cmd_q2_cam(const RunConfig& cfg);
void cmd_q3_gradient(const RunConfig& cfg);
void cmd_q3_crossdomain(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg);

}  // namespace ctxbias::pipeline
