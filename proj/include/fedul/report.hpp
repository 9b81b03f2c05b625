#pragma once

#include <optional>
#include <string>
#include <vector>

#include "fedul/nn.hpp"
#include "fedul/verify.hpp"

namespace fedul {

struct DistanceReport {
    double euclidean = 0.0;
    std::optional<double> cosine;         // raw, in [-1, 1]; unset for a zero vector
    std::optional<double> cosine_unit;    // rescaled to [0, 1] for convenience
};

// Euclidean distance plus cosine similarity of two parameter vectors.
DistanceReport param_distance(const VectorXd& w1, const VectorXd& w2);

struct MembershipReport {
    double inferred_member_ratio = 0.0;  // over the leaving data only
    double threshold = 0.0;
    bool degenerate = false;  // member/nonmember confidences were inseparable
    std::string attack = "confidence_threshold";
};

// Confidence-threshold membership inference: fit the threshold that best
// separates member from nonmember confidences, then score the leaving set.
MembershipReport membership_inference(const ModelSpec& spec, const VectorXd& params,
                                      const MatrixXd& member_inputs,
                                      const MatrixXd& nonmember_inputs,
                                      const MatrixXd& leaving_inputs);

// Floats in emitted artifacts carry 6 significant digits; identical data
// always re-emits byte-identically.
std::string format_float(double v);

struct ExperimentLog;  // defined in mechanism.hpp

void emit_csv(const ExperimentLog& log, const std::string& path);
void emit_jsonl(const ExperimentLog& log, const std::string& path);
void emit_summary(const ExperimentLog& log, const std::string& path);

// Parsers for the emitted artifacts (round-trip checked in the tests).
std::vector<std::vector<std::string>> parse_csv(const std::string& path);
void parse_jsonl_into(const std::string& path, ExperimentLog& log);

}  // namespace fedul
