#include "fedul/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fedul/errors.hpp"
#include "fedul/mechanism.hpp"
#include "json.hpp"

namespace fedul {

DistanceReport param_distance(const VectorXd& w1, const VectorXd& w2) {
    if (w1.size() != w2.size()) throw ConfigError("param_distance length mismatch");
    DistanceReport r;
    r.euclidean = (w1 - w2).norm();
    const double n1 = w1.norm(), n2 = w2.norm();
    if (n1 > 0 && n2 > 0) {
        const double c = std::clamp(w1.dot(w2) / (n1 * n2), -1.0, 1.0);
        r.cosine = c;
        r.cosine_unit = 0.5 * (c + 1.0);
    }
    return r;
}

namespace {

VectorXd confidences(const ModelSpec& spec, const VectorXd& params, const MatrixXd& inputs) {
    MatrixXd probs = softmax_probs(
        forward(spec, params, {inputs, VectorXi::Zero(static_cast<int>(inputs.rows()))}));
    return probs.rowwise().maxCoeff();
}

}  // namespace

MembershipReport membership_inference(const ModelSpec& spec, const VectorXd& params,
                                      const MatrixXd& member_inputs,
                                      const MatrixXd& nonmember_inputs,
                                      const MatrixXd& leaving_inputs) {
    if (member_inputs.rows() == 0 || nonmember_inputs.rows() == 0 || leaving_inputs.rows() == 0)
        throw ConfigError("membership inference needs non-empty sets");
    VectorXd member = confidences(spec, params, member_inputs);
    VectorXd nonmember = confidences(spec, params, nonmember_inputs);

    // Candidate thresholds: every observed confidence. Pick the one with the
    // best member/nonmember separation (true positives minus false positives);
    // ties resolve to the smallest threshold for determinism.
    std::vector<double> candidates(member.data(), member.data() + member.size());
    candidates.insert(candidates.end(), nonmember.data(), nonmember.data() + nonmember.size());
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    MembershipReport report;
    double best_sep = -2.0;
    for (double tau : candidates) {
        const double tpr =
            static_cast<double>((member.array() >= tau).count()) / member.size();
        const double fpr =
            static_cast<double>((nonmember.array() >= tau).count()) / nonmember.size();
        if (tpr - fpr > best_sep) {
            best_sep = tpr - fpr;
            report.threshold = tau;
        }
    }
    // The fitted separation is a two-sample KS statistic; below the 1%
    // critical value the confidence sets are indistinguishable and the
    // threshold would be pure noise. Fall back to the midpoint of the means
    // and flag the report.
    const double ks_critical =
        1.63 * std::sqrt(1.0 / member.size() + 1.0 / nonmember.size());
    report.degenerate = best_sep <= ks_critical;
    if (report.degenerate) report.threshold = 0.5 * (member.mean() + nonmember.mean());

    VectorXd leaving = confidences(spec, params, leaving_inputs);
    report.inferred_member_ratio =
        static_cast<double>((leaving.array() >= report.threshold).count()) / leaving.size();
    return report;
}

std::string format_float(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

namespace {

std::string opt_cell(const std::optional<double>& v) { return v ? format_float(*v) : ""; }

void json_number(std::ostringstream& out, double v) { out << format_float(v); }

void json_opt(std::ostringstream& out, const char* key, const std::optional<double>& v,
              bool& first) {
    out << (first ? "" : ",") << "\"" << key << "\":";
    if (v)
        json_number(out, *v);
    else
        out << "null";
    first = false;
}

std::string row_to_jsonl(const RoundLog& r) {
    std::ostringstream out;
    out << "{\"round\":" << r.round << ",\"event\":\"" << r.event << "\"";
    out << ",\"test_acc\":" << format_float(r.test_acc);
    out << ",\"test_loss\":" << format_float(r.test_loss);
    out << ",\"leave_acc\":" << format_float(r.leave_acc);
    out << ",\"leave_loss\":" << format_float(r.leave_loss);
    out << ",\"leave_kl\":" << format_float(r.leave_kl);
    bool first = false;
    json_opt(out, "leave_influence", r.leave_influence, first);
    json_opt(out, "marker_bound", r.marker_bound, first);
    json_opt(out, "marker_acc", r.marker_acc, first);
    json_opt(out, "marker_loss", r.marker_loss, first);
    json_opt(out, "marker_kl", r.marker_kl, first);
    json_opt(out, "marker_influence", r.marker_influence, first);
    out << "}";
    return out.str();
}

const char* kCsvHeader =
    "round,event,test_acc,test_loss,leave_acc,leave_loss,leave_kl,leave_influence,"
    "marker_bound,marker_acc,marker_loss,marker_kl,marker_influence";

}  // namespace

void emit_csv(const ExperimentLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << kCsvHeader << "\n";
    for (const RoundLog& r : log.rounds) {
        out << r.round << "," << r.event << "," << format_float(r.test_acc) << ","
            << format_float(r.test_loss) << "," << format_float(r.leave_acc) << ","
            << format_float(r.leave_loss) << "," << format_float(r.leave_kl) << ","
            << opt_cell(r.leave_influence) << "," << opt_cell(r.marker_bound) << ","
            << opt_cell(r.marker_acc) << "," << opt_cell(r.marker_loss) << ","
            << opt_cell(r.marker_kl) << "," << opt_cell(r.marker_influence) << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

void emit_jsonl(const ExperimentLog& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    for (const RoundLog& r : log.rounds) out << row_to_jsonl(r) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

void emit_summary(const ExperimentLog& log, const std::string& path) {
    std::ostringstream out;
    out << "{\n";
    out << "  \"marker\": \"" << marker_name(log.config.marker) << "\",\n";
    out << "  \"unlearn_method\": \"" << unlearn_name(log.config.unlearn.method) << "\",\n";
    out << "  \"aggregation\": \"" << aggregation_name(log.config.fl.aggregation) << "\",\n";
    out << "  \"bound_metric\": \"" << metric_name(log.metric) << "\",\n";
    out << "  \"baseline\": " << format_float(log.baseline) << ",\n";
    out << "  \"current\": " << format_float(log.current) << ",\n";
    out << "  \"metric_diff\": " << format_float(log.diff) << ",\n";
    out << "  \"decision_reading\": " << format_float(log.decision_reading) << ",\n";
    out << "  \"signed_diff\": " << format_float(log.signed_diff) << ",\n";
    out << "  \"threshold\": " << format_float(log.threshold) << ",\n";
    out << "  \"verify_decision\": \"" << decision_name(log.decision) << "\",\n";
    out << "  \"marking_failed\": " << (log.marking_failed ? "true" : "false") << ",\n";
    out << "  \"attack_flagged\": " << (log.attack_flagged ? "true" : "false") << ",\n";
    out << "  \"correlation_r\": "
        << (log.correlation_r ? format_float(*log.correlation_r) : "null") << ",\n";
    out << "  \"param_distance\": {\"euclidean\": " << format_float(log.param_distance_report.euclidean)
        << ", \"cosine\": "
        << (log.param_distance_report.cosine ? format_float(*log.param_distance_report.cosine)
                                             : "null")
        << ", \"cosine_unit\": "
        << (log.param_distance_report.cosine_unit
                ? format_float(*log.param_distance_report.cosine_unit)
                : "null")
        << "},\n";
    out << "  \"membership\": {\"inferred_member_ratio\": "
        << format_float(log.membership.inferred_member_ratio)
        << ", \"threshold\": " << format_float(log.membership.threshold)
        << ", \"degenerate\": " << (log.membership.degenerate ? "true" : "false")
        << ", \"attack\": \"" << log.membership.attack << "\"},\n";
    out << "  \"unlearn_storage_bytes\": " << log.unlearn_storage_bytes << ",\n";
    out << "  \"marker_storage_bytes\": " << log.marker_storage_bytes << ",\n";
    out << "  \"rounds\": " << log.rounds.size() << ",\n";
    out << "  \"config\": " << config_to_json(log.config) << "\n";
    out << "}\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << out.str();
    if (!f) throw IoError("write failed: " + path);
}

std::vector<std::vector<std::string>> parse_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        rows.push_back(std::move(cells));
    }
    return rows;
}

void parse_jsonl_into(const std::string& path, ExperimentLog& log) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    log.rounds.clear();
    std::string line;
    auto opt_of = [](const nlohmann::json& j, const char* key) -> std::optional<double> {
        if (!j.contains(key) || j[key].is_null()) return std::nullopt;
        return j[key].get<double>();
    };
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        RoundLog r;
        r.round = j.at("round").get<int>();
        r.event = j.at("event").get<std::string>();
        r.test_acc = j.at("test_acc").get<double>();
        r.test_loss = j.at("test_loss").get<double>();
        r.leave_acc = j.at("leave_acc").get<double>();
        r.leave_loss = j.at("leave_loss").get<double>();
        r.leave_kl = j.at("leave_kl").get<double>();
        r.leave_influence = opt_of(j, "leave_influence");
        r.marker_bound = opt_of(j, "marker_bound");
        r.marker_acc = opt_of(j, "marker_acc");
        r.marker_loss = opt_of(j, "marker_loss");
        r.marker_kl = opt_of(j, "marker_kl");
        r.marker_influence = opt_of(j, "marker_influence");
        log.rounds.push_back(std::move(r));
    }
}

}  // namespace fedul
