#pragma once

#include <string>
#include <vector>

#include "core/mat.hpp"
#include "evalsuite/evalsuite.hpp"
#include "interventions/interventions.hpp"
#include "probelab/probelab.hpp"

namespace countlab {

// Standard laboratory figures, shared by the end-to-end pipeline and the
// plot command. Each writes one SVG to `path`.

void figure_counting_per_n(const std::string& path, const std::vector<Prediction>& text,
                           const std::vector<Prediction>& vision);

void figure_mean_prediction(const std::string& path, const std::vector<Prediction>& vision);

// `ve` should already be sliced to the error regime of interest.
void figure_attractors(const std::string& path, const std::vector<Prediction>& ve);

// Comparison accuracy against counting accuracy; counting entries above
// n_cap are dropped so both curves share an axis.
void figure_comparison_per_n(const std::string& path, const std::vector<Prediction>& cmp,
                             const std::vector<Prediction>& vision, int n_cap);

void figure_gaps(const std::string& path, const ProbeReport& report);

void figure_steering(const std::string& path, const SteeringCurve& curve);

void figure_head_heatmap(const std::string& path, const Mat<double>& heat);

}  // namespace countlab
