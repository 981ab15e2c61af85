#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "gsocc/core.hpp"
#include "gsocc/splat.hpp"

namespace gsocc {

/// OS-reported peak resident set size in bytes (Linux VmHWM); a runtime
/// diagnostic, not a deterministic quantity. Returns 0 if unavailable.
inline std::int64_t peak_rss_bytes() {
    std::FILE* f = std::fopen("/proc/self/status", "r");
    if (!f) return 0;
    char line[256];
    std::int64_t kb = 0;
    while (std::fgets(line, sizeof(line), f)) {
        if (std::sscanf(line, "VmHWM: %ld kB", &kb) == 1) break;
    }
    std::fclose(f);
    return kb * 1024;
}

/// Metric bundle for one prediction/GT pair. The `metrics` part is fully
/// deterministic; wall time and memory are environment diagnostics.
struct EvalReport {
    double iou = 0.0;
    double miou = 0.0;
    double miou_dynamic = 0.0;
    double miou_static = 0.0;
    std::vector<double> per_class; // aligned with taxonomy; NaN = no support
    std::vector<std::string> class_names;

    double wall_time_s = 0.0;
    std::int64_t peak_rss = 0;
};

inline EvalReport eval_report(const VoxelGrid& pred, const VoxelGrid& gt,
                              const SemanticTaxonomy& taxonomy, double wall_time_s = 0.0) {
    const ConfusionCounts counts = confusion(pred, gt, taxonomy);
    const IoUMetrics m = iou_miou(counts, taxonomy);
    EvalReport r;
    r.iou = m.iou;
    r.miou = m.miou;
    r.miou_dynamic = subset_miou(m, taxonomy, true);
    r.miou_static = subset_miou(m, taxonomy, false);
    r.per_class = m.per_class;
    r.class_names = taxonomy.class_names;
    r.wall_time_s = wall_time_s;
    r.peak_rss = peak_rss_bytes();
    return r;
}

} // namespace gsocc
