#include "posediff/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <Eigen/SVD>

namespace posediff {

namespace {

std::string number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

using Frame = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

} // namespace

Matrix<double> joint_errors(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt) {
    require_same_shape(pred, gt, "joint_errors");
    Matrix<double> out(pred.frames(), pred.joints());
    for (Index n = 0; n < pred.frames(); ++n) {
        for (Index j = 0; j < pred.joints(); ++j) {
            out(n, j) = (pred.joint(n, j) - gt.joint(n, j)).norm();
        }
    }
    return out;
}

double mpjpe(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt) {
    return joint_errors(pred, gt).mean();
}

RowVector<double> per_joint_mpjpe(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt) {
    return joint_errors(pred, gt).colwise().mean();
}

PoseSequence3D<double> procrustes_align(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt,
                                        AlignmentKind kind) {
    require_same_shape(pred, gt, "procrustes_align");
    const Index J = pred.joints();
    if (J < 3) {
        throw AlignmentError("procrustes_align: need at least 3 joints per frame");
    }
    PoseSequence3D<double> out(pred.frames(), J);
    for (Index n = 0; n < pred.frames(); ++n) {
        const Frame p = pred.coords().middleRows(n * J, J);
        const Frame g = gt.coords().middleRows(n * J, J);
        const Eigen::RowVector3d mp = p.colwise().mean();
        const Eigen::RowVector3d mg = g.colwise().mean();
        const Frame pc = p.rowwise() - mp;
        const Frame gc = g.rowwise() - mg;

        for (const Frame* f : {&pc, &gc}) {
            Eigen::JacobiSVD<Eigen::Matrix3d> spread(f->transpose() * *f);
            const auto sv = spread.singularValues();
            if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0)) {
                throw AlignmentError("procrustes_align: joints of frame " + std::to_string(n) +
                                     " are degenerate (collinear or coincident)");
            }
        }

        // rotation maps centered pred rows onto centered gt rows: x -> x R
        Eigen::JacobiSVD<Eigen::Matrix3d> svd(pc.transpose() * gc, Eigen::ComputeFullU | Eigen::ComputeFullV);
        const Eigen::Matrix3d& u = svd.matrixU();
        const Eigen::Matrix3d& v = svd.matrixV();
        Eigen::Vector3d d(1.0, 1.0, (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0);
        const Eigen::Matrix3d r = u * d.asDiagonal() * v.transpose();
        double scale = 1.0;
        if (kind == AlignmentKind::similarity) {
            scale = svd.singularValues().dot(d) / pc.squaredNorm();
        }
        out.coords().middleRows(n * J, J) = ((scale * pc * r).rowwise() + mg);
    }
    return out;
}

double p_mpjpe(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt, AlignmentKind kind) {
    return mpjpe(procrustes_align(pred, gt, kind), gt);
}

double pck(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt, double threshold_mm) {
    if (!(threshold_mm >= 0.0)) {
        throw RangeError("pck: threshold must be non-negative");
    }
    const auto e = joint_errors(pred, gt);
    return 100.0 * static_cast<double>((e.array() <= threshold_mm).count()) / static_cast<double>(e.size());
}

std::vector<double> auc_thresholds() {
    std::vector<double> out;
    for (int i = 0; i <= 30; ++i) {
        out.push_back(5.0 * i);
    }
    return out;
}

double auc(const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt) {
    const auto e = joint_errors(pred, gt);
    const auto thresholds = auc_thresholds();
    double sum = 0.0;
    for (double th : thresholds) {
        sum += 100.0 * static_cast<double>((e.array() <= th).count()) / static_cast<double>(e.size());
    }
    return sum / static_cast<double>(thresholds.size());
}

PoseSequence3D<double> select_frames(const PoseSequence3D<double>& pose, const std::vector<std::uint8_t>& mask) {
    if (mask.empty()) {
        return pose;
    }
    if (static_cast<Index>(mask.size()) != pose.frames()) {
        throw ShapeError("select_frames: mask length differs from frame count");
    }
    const Index kept = std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
    if (kept == 0) {
        throw ShapeError("select_frames: no frame is selected");
    }
    const Index J = pose.joints();
    PoseSequence3D<double> out(kept, J);
    Index row = 0;
    for (Index n = 0; n < pose.frames(); ++n) {
        if (mask[static_cast<std::size_t>(n)] != 0) {
            out.coords().middleRows(row * J, J) = pose.coords().middleRows(n * J, J);
            ++row;
        }
    }
    return out;
}

SequenceMetrics evaluate_sequence(const std::string& id, const std::string& action,
                                  const PoseSequence3D<double>& pred, const PoseSequence3D<double>& gt,
                                  AlignmentKind kind) {
    SequenceMetrics m;
    m.id = id;
    m.action = action;
    m.frames = gt.frames();
    m.mpjpe_mm = mpjpe(pred, gt);
    m.p_mpjpe_mm = p_mpjpe(pred, gt, kind);
    m.pck_percent = pck(pred, gt);
    m.auc_percent = auc(pred, gt);
    return m;
}

namespace {

SequenceMetrics average(const std::vector<const SequenceMetrics*>& rows) {
    SequenceMetrics out;
    for (const auto* r : rows) {
        out.mpjpe_mm += r->mpjpe_mm;
        out.p_mpjpe_mm += r->p_mpjpe_mm;
        out.pck_percent += r->pck_percent;
        out.auc_percent += r->auc_percent;
        out.frames += r->frames;
    }
    const double k = static_cast<double>(rows.size());
    out.mpjpe_mm /= k;
    out.p_mpjpe_mm /= k;
    out.pck_percent /= k;
    out.auc_percent /= k;
    return out;
}

} // namespace

MetricReport build_report(std::vector<SequenceMetrics> sequences) {
    if (sequences.empty()) {
        throw ConfigError("build_report: no sequences to report");
    }
    std::sort(sequences.begin(), sequences.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    MetricReport report;
    report.sequences = std::move(sequences);
    std::map<std::string, std::vector<const SequenceMetrics*>> groups;
    for (const auto& s : report.sequences) {
        groups[s.action].push_back(&s);
    }
    std::vector<const SequenceMetrics*> action_rows;
    for (const auto& [action, rows] : groups) {
        auto a = average(rows);
        a.id = action;
        a.action = action;
        report.per_action.emplace(action, a);
    }
    for (const auto& [_, a] : report.per_action) {
        action_rows.push_back(&a);
    }
    report.aggregate = average(action_rows);
    report.aggregate.id = "all";
    report.aggregate.action = "all";
    return report;
}

std::string report_csv(const MetricReport& report) {
    std::ostringstream out;
    out << "scope,id,action,frames,mpjpe_mm,p_mpjpe_mm,pck150_percent,auc_percent\n";
    auto row = [&](const char* scope, const SequenceMetrics& m) {
        out << scope << ',' << m.id << ',' << m.action << ',' << m.frames << ',' << number(m.mpjpe_mm) << ','
            << number(m.p_mpjpe_mm) << ',' << number(m.pck_percent) << ',' << number(m.auc_percent) << '\n';
    };
    for (const auto& s : report.sequences) {
        row("sequence", s);
    }
    for (const auto& [_, a] : report.per_action) {
        row("action", a);
    }
    row("aggregate", report.aggregate);
    return out.str();
}

} // namespace posediff
