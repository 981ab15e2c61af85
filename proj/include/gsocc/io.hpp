#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gsocc/ablation.hpp"
#include "gsocc/core.hpp"
#include "gsocc/errors.hpp"
#include "gsocc/pipeline.hpp"
#include "gsocc/report.hpp"
#include "gsocc/scene.hpp"

namespace gsocc {

using nlohmann::json;

// ---------------------------------------------------------------------------
// base64 (RFC 4648, with padding)
// ---------------------------------------------------------------------------

namespace detail {

inline const char* b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string b64_encode(const unsigned char* data, size_t len) {
    const char* tab = b64_alphabet();
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= len; i += 3) {
        const unsigned v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back(tab[v & 63]);
    }
    if (i + 1 == len) {
        const unsigned v = data[i] << 16;
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out += "==";
    } else if (i + 2 == len) {
        const unsigned v = (data[i] << 16) | (data[i + 1] << 8);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<unsigned char> b64_decode(const std::string& s) {
    static int lut[256];
    static bool init = false;
    if (!init) {
        for (int i = 0; i < 256; ++i) lut[i] = -1;
        for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(b64_alphabet()[i])] = i;
        init = true;
    }
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    int buffer = 0, bits = 0;
    for (const char c : s) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        const int v = lut[static_cast<unsigned char>(c)];
        if (v < 0) throw IoError("invalid base64 character");
        buffer = (buffer << 6) | v;
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<unsigned char>((buffer >> bits) & 0xff));
        }
    }
    return out;
}

/// Row-major little-endian float64 bytes of a matrix.
inline std::string encode_matrix(const MatrixXd& m) {
    std::vector<unsigned char> bytes(sizeof(double) * static_cast<size_t>(m.size()));
    size_t off = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            std::memcpy(bytes.data() + off, &m(i, j), sizeof(double));
            off += sizeof(double);
        }
    return b64_encode(bytes.data(), bytes.size());
}

inline MatrixXd decode_matrix(const std::string& b64, Eigen::Index rows, Eigen::Index cols) {
    const std::vector<unsigned char> bytes = b64_decode(b64);
    if (bytes.size() != sizeof(double) * static_cast<size_t>(rows) * static_cast<size_t>(cols))
        throw IoError("matrix payload size mismatch");
    MatrixXd m(rows, cols);
    size_t off = 0;
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
            std::memcpy(&m(i, j), bytes.data() + off, sizeof(double));
            off += sizeof(double);
        }
    return m;
}

inline std::string encode_classes(const std::vector<std::int32_t>& v) {
    return b64_encode(reinterpret_cast<const unsigned char*>(v.data()),
                      v.size() * sizeof(std::int32_t));
}

inline std::vector<std::int32_t> decode_classes(const std::string& b64, size_t count) {
    const std::vector<unsigned char> bytes = b64_decode(b64);
    if (bytes.size() != count * sizeof(std::int32_t)) throw IoError("class payload size mismatch");
    std::vector<std::int32_t> v(count);
    std::memcpy(v.data(), bytes.data(), bytes.size());
    return v;
}

inline json finite_or_null(double v) {
    if (std::isnan(v) || std::isinf(v)) return nullptr;
    return v;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Taxonomy
// ---------------------------------------------------------------------------

inline json taxonomy_to_json(const SemanticTaxonomy& t) {
    return json{{"class_names", t.class_names},
                {"empty_class", t.empty_class},
                {"static_boundary", t.static_boundary},
                {"dynamic_flags", t.dynamic_flags}};
}

inline SemanticTaxonomy taxonomy_from_json(const json& j) {
    SemanticTaxonomy t;
    t.class_names = j.at("class_names").get<std::vector<std::string>>();
    t.empty_class = j.at("empty_class").get<int>();
    t.static_boundary = j.at("static_boundary").get<int>();
    t.dynamic_flags = j.at("dynamic_flags").get<std::vector<bool>>();
    t.validate();
    return t;
}

// ---------------------------------------------------------------------------
// Scene files (GaussianSet + taxonomy)
// ---------------------------------------------------------------------------

inline json scene_to_json(const GaussianSet& set, const SemanticTaxonomy& taxonomy) {
    return json{{"schema", "gsocc.scene/1"},
                {"n", set.size()},
                {"d", set.num_classes()},
                {"f", set.feature_dim()},
                {"layout",
                 {{"mean", GaussianSet::mean_offset()},
                  {"scale", GaussianSet::scale_offset()},
                  {"rotation", GaussianSet::rotation_offset()},
                  {"opacity", GaussianSet::opacity_offset()},
                  {"semantics", GaussianSet::semantics_offset()},
                  {"feature", set.feature_offset()},
                  {"dim", set.dim()}}},
                {"taxonomy", taxonomy_to_json(taxonomy)},
                {"props_f64_b64", detail::encode_matrix(set.props())}};
}

inline std::pair<GaussianSet, SemanticTaxonomy> scene_from_json(const json& j) {
    if (j.value("schema", "") != "gsocc.scene/1") throw IoError("not a gsocc.scene/1 file");
    const int n = j.at("n").get<int>();
    const int d = j.at("d").get<int>();
    const int f = j.at("f").get<int>();
    const SemanticTaxonomy tax = taxonomy_from_json(j.at("taxonomy"));
    if (tax.num_classes() != d) throw IoError("taxonomy/d mismatch in scene file");
    MatrixXd props = detail::decode_matrix(j.at("props_f64_b64").get<std::string>(), n, 11 + d + f);
    return {GaussianSet(std::move(props), d, f), tax};
}

// ---------------------------------------------------------------------------
// Grid files
// ---------------------------------------------------------------------------

inline json grid_to_json(const VoxelGrid& grid, const SemanticTaxonomy& taxonomy) {
    return json{{"schema", "gsocc.grid/1"},
                {"origin", {grid.origin.x(), grid.origin.y(), grid.origin.z()}},
                {"voxel_size", grid.voxel_size},
                {"dims", {grid.dims.x(), grid.dims.y(), grid.dims.z()}},
                {"taxonomy", taxonomy_to_json(taxonomy)},
                {"classes_i32_b64", detail::encode_classes(grid.classes)}};
}

inline std::pair<VoxelGrid, SemanticTaxonomy> grid_from_json(const json& j) {
    if (j.value("schema", "") != "gsocc.grid/1") throw IoError("not a gsocc.grid/1 file");
    const auto o = j.at("origin");
    const auto dims = j.at("dims");
    VoxelGrid g(Vector3d(o[0].get<double>(), o[1].get<double>(), o[2].get<double>()),
                j.at("voxel_size").get<double>(),
                Eigen::Vector3i(dims[0].get<int>(), dims[1].get<int>(), dims[2].get<int>()));
    g.classes = detail::decode_classes(j.at("classes_i32_b64").get<std::string>(),
                                       static_cast<size_t>(g.num_voxels()));
    return {std::move(g), taxonomy_from_json(j.at("taxonomy"))};
}

// ---------------------------------------------------------------------------
// Parameter files
// ---------------------------------------------------------------------------

inline json attn_ids_to_json(const AttnBlockIds& b) {
    return json{{"wq", b.wq}, {"wk", b.wk}, {"wv", b.wv}, {"decode", b.decode}, {"bias", b.bias}};
}

inline AttnBlockIds attn_ids_from_json(const json& j) {
    return {j.at("wq").get<int>(), j.at("wk").get<int>(), j.at("wv").get<int>(),
            j.at("decode").get<int>(), j.at("bias").get<int>()};
}

inline json params_to_json(const PipelineParams& p) {
    json tensors = json::array();
    for (size_t i = 0; i < p.tensors.size(); ++i)
        tensors.push_back({{"name", p.names[i]},
                           {"rows", p.tensors[i].rows()},
                           {"cols", p.tensors[i].cols()},
                           {"f64_b64", detail::encode_matrix(p.tensors[i])}});
    json geo = json::array(), sem = json::array(), mlp = json::array();
    for (const auto& b : p.geo_blocks) geo.push_back(attn_ids_to_json(b));
    for (const auto& b : p.sem_blocks) sem.push_back(attn_ids_to_json(b));
    for (const auto& b : p.mlp_blocks)
        mlp.push_back({{"w1", b.w1}, {"b1", b.b1}, {"decode", b.decode}, {"bias", b.bias}});
    json j{{"schema", "gsocc.params/1"},
           {"tensors", tensors},
           {"geo_blocks", geo},
           {"sem_blocks", sem},
           {"mlp_blocks", mlp},
           {"branch_concat", p.branch_concat},
           {"has_dsdga", p.has_dsdga}};
    if (p.has_dsdga) {
        if (p.dca.wq >= 0) j["dca"] = attn_ids_to_json(p.dca);
        if (p.sca.wq >= 0) j["sca"] = attn_ids_to_json(p.sca);
    }
    return j;
}

inline PipelineParams params_from_json(const json& j) {
    if (j.value("schema", "") != "gsocc.params/1") throw IoError("not a gsocc.params/1 file");
    PipelineParams p;
    for (const auto& t : j.at("tensors"))
        p.add(t.at("name").get<std::string>(),
              detail::decode_matrix(t.at("f64_b64").get<std::string>(),
                                    t.at("rows").get<Eigen::Index>(),
                                    t.at("cols").get<Eigen::Index>()));
    for (const auto& b : j.at("geo_blocks")) p.geo_blocks.push_back(attn_ids_from_json(b));
    for (const auto& b : j.at("sem_blocks")) p.sem_blocks.push_back(attn_ids_from_json(b));
    for (const auto& b : j.at("mlp_blocks"))
        p.mlp_blocks.push_back({b.at("w1").get<int>(), b.at("b1").get<int>(),
                                b.at("decode").get<int>(), b.at("bias").get<int>()});
    p.branch_concat = j.at("branch_concat").get<std::vector<int>>();
    p.has_dsdga = j.at("has_dsdga").get<bool>();
    if (j.contains("dca")) p.dca = attn_ids_from_json(j.at("dca"));
    if (j.contains("sca")) p.sca = attn_ids_from_json(j.at("sca"));
    return p;
}

// ---------------------------------------------------------------------------
// Pipeline / scene configuration files
// ---------------------------------------------------------------------------

inline std::string fuse_mode_name(FuseMode m) {
    switch (m) {
        case FuseMode::adaptive: return "adaptive";
        case FuseMode::average: return "add";
        case FuseMode::concat_project: return "concat";
    }
    return "?";
}

inline FuseMode fuse_mode_from_name(const std::string& s) {
    if (s == "adaptive") return FuseMode::adaptive;
    if (s == "add") return FuseMode::average;
    if (s == "concat") return FuseMode::concat_project;
    throw IoError("unknown fuse mode: " + s);
}

inline RefineKind refine_kind_from_name(const std::string& s) {
    if (s == "none") return RefineKind::none;
    if (s == "mlp") return RefineKind::mlp;
    if (s == "gga") return RefineKind::gga_only;
    if (s == "sga") return RefineKind::sga_only;
    if (s == "dgga") return RefineKind::dgga;
    if (s == "mga") return RefineKind::mga;
    throw IoError("unknown refine kind: " + s);
}

inline json pipeline_config_to_json(const PipelineConfig& c) {
    return json{{"refine", refine_kind_name(c.refine)},
                {"num_layers", c.num_layers},
                {"k", c.k},
                {"m", c.m},
                {"topk_schedule", c.topk_schedule},
                {"topm_schedule", c.topm_schedule},
                {"graph",
                 {{"mode", c.graph.mode == GraphMode::plain_knn ? "plain_knn" : "adaptive_radius"},
                  {"rho", c.graph.rho},
                  {"k_min", c.graph.k_min}}},
                {"fuse", fuse_mode_name(c.fuse)},
                {"dsdga", c.dsdga_on},
                {"dca", c.dca_on},
                {"sca", c.sca_on},
                {"d_k", c.d_k},
                {"mlp_hidden_factor", c.mlp_hidden_factor},
                {"splat", {{"cutoff_sigmas", c.splat.cutoff_sigmas}, {"tau_occ", c.splat.tau_occ}}},
                {"param_seed", c.param_seed}};
}

inline PipelineConfig pipeline_config_from_json(const json& j) {
    PipelineConfig c;
    c.refine = refine_kind_from_name(j.value("refine", "dgga"));
    c.num_layers = j.value("num_layers", c.num_layers);
    c.k = j.value("k", c.k);
    c.m = j.value("m", c.m);
    if (j.contains("topk_schedule")) c.topk_schedule = j.at("topk_schedule").get<std::vector<int>>();
    if (j.contains("topm_schedule")) c.topm_schedule = j.at("topm_schedule").get<std::vector<int>>();
    if (j.contains("graph")) {
        const auto& g = j.at("graph");
        c.graph.mode = g.value("mode", "plain_knn") == std::string("adaptive_radius")
                           ? GraphMode::adaptive_radius
                           : GraphMode::plain_knn;
        c.graph.rho = g.value("rho", c.graph.rho);
        c.graph.k_min = g.value("k_min", c.graph.k_min);
    }
    if (j.contains("fuse")) c.fuse = fuse_mode_from_name(j.at("fuse").get<std::string>());
    c.dsdga_on = j.value("dsdga", c.dsdga_on);
    c.dca_on = j.value("dca", c.dca_on);
    c.sca_on = j.value("sca", c.sca_on);
    c.d_k = j.value("d_k", c.d_k);
    c.mlp_hidden_factor = j.value("mlp_hidden_factor", c.mlp_hidden_factor);
    if (j.contains("splat")) {
        c.splat.cutoff_sigmas = j.at("splat").value("cutoff_sigmas", c.splat.cutoff_sigmas);
        c.splat.tau_occ = j.at("splat").value("tau_occ", c.splat.tau_occ);
    }
    c.param_seed = j.value("param_seed", c.param_seed);
    return c;
}

inline json scene_spec_to_json(const SceneSpec& s) {
    return json{{"seed", s.seed},
                {"extent_xy", s.extent_xy},
                {"extent_z", s.extent_z},
                {"ground_plane", s.ground_plane},
                {"boxes_per_dynamic_class", s.boxes_per_dynamic_class},
                {"walls_per_static_class", s.walls_per_static_class},
                {"posts_per_static_class", s.posts_per_static_class},
                {"num_gaussians", s.num_gaussians},
                {"position_noise", s.position_noise},
                {"logit_noise", s.logit_noise},
                {"true_class_logit", s.true_class_logit},
                {"feature_noise", s.feature_noise},
                {"feature_dim", s.feature_dim},
                {"taxonomy", taxonomy_to_json(s.taxonomy)},
                {"grid",
                 {{"origin", {s.grid.origin.x(), s.grid.origin.y(), s.grid.origin.z()}},
                  {"voxel_size", s.grid.voxel_size},
                  {"dims", {s.grid.dims.x(), s.grid.dims.y(), s.grid.dims.z()}}}}};
}

inline SceneSpec scene_spec_from_json(const json& j) {
    SceneSpec s;
    s.seed = j.value("seed", s.seed);
    s.extent_xy = j.value("extent_xy", s.extent_xy);
    s.extent_z = j.value("extent_z", s.extent_z);
    s.ground_plane = j.value("ground_plane", s.ground_plane);
    s.boxes_per_dynamic_class = j.value("boxes_per_dynamic_class", s.boxes_per_dynamic_class);
    s.walls_per_static_class = j.value("walls_per_static_class", s.walls_per_static_class);
    s.posts_per_static_class = j.value("posts_per_static_class", s.posts_per_static_class);
    s.num_gaussians = j.value("num_gaussians", s.num_gaussians);
    s.position_noise = j.value("position_noise", s.position_noise);
    s.logit_noise = j.value("logit_noise", s.logit_noise);
    s.true_class_logit = j.value("true_class_logit", s.true_class_logit);
    s.feature_noise = j.value("feature_noise", s.feature_noise);
    s.feature_dim = j.value("feature_dim", s.feature_dim);
    if (j.contains("taxonomy")) s.taxonomy = taxonomy_from_json(j.at("taxonomy"));
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        const auto o = g.at("origin");
        const auto dims = g.at("dims");
        s.grid.origin = Vector3d(o[0].get<double>(), o[1].get<double>(), o[2].get<double>());
        s.grid.voxel_size = g.at("voxel_size").get<double>();
        s.grid.dims = Eigen::Vector3i(dims[0].get<int>(), dims[1].get<int>(), dims[2].get<int>());
    }
    return s;
}

// ---------------------------------------------------------------------------
// Reports and ablation tables
// ---------------------------------------------------------------------------

inline json report_to_json(const EvalReport& r) {
    json per_class = json::object();
    for (size_t c = 0; c < r.per_class.size(); ++c)
        per_class[r.class_names[c]] = detail::finite_or_null(r.per_class[c]);
    return json{{"schema", "gsocc.report/1"},
                {"metrics",
                 {{"iou", r.iou},
                  {"miou", r.miou},
                  {"miou_dynamic", r.miou_dynamic},
                  {"miou_static", r.miou_static},
                  {"per_class", per_class}}},
                {"runtime", {{"wall_time_s", r.wall_time_s}, {"peak_rss_bytes", r.peak_rss}}}};
}

inline std::string report_to_text(const EvalReport& r) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof(line), "%-16s %10s\n", "metric", "value");
    os << line;
    auto row = [&](const char* name, double v) {
        std::snprintf(line, sizeof(line), "%-16s %10.4f\n", name, v);
        os << line;
    };
    row("IoU", r.iou);
    row("mIoU", r.miou);
    row("mIoU(dynamic)", r.miou_dynamic);
    row("mIoU(static)", r.miou_static);
    for (size_t c = 0; c < r.per_class.size(); ++c) {
        if (std::isnan(r.per_class[c])) {
            std::snprintf(line, sizeof(line), "%-16s %10s\n",
                          ("IoU:" + r.class_names[c]).c_str(), "n/a");
            os << line;
        } else {
            row(("IoU:" + r.class_names[c]).c_str(), r.per_class[c]);
        }
    }
    std::snprintf(line, sizeof(line), "%-16s %10.3f\n", "wall_time_s", r.wall_time_s);
    os << line;
    std::snprintf(line, sizeof(line), "%-16s %10ld\n", "peak_rss_bytes",
                  static_cast<long>(r.peak_rss));
    os << line;
    return os.str();
}

inline json ablation_to_json(const AblationTable& t) {
    json rows = json::array();
    for (const auto& r : t.rows)
        rows.push_back({{"variant", r.variant},
                        {"miou", r.miou},
                        {"iou", r.iou},
                        {"miou_dynamic", r.miou_dynamic},
                        {"miou_static", r.miou_static},
                        {"final_loss", r.final_loss},
                        {"per_seed_miou", r.per_seed_miou}});
    return json{{"schema", "gsocc.ablation/1"}, {"suite", t.suite},     {"seeds", t.seeds},
                {"steps", t.steps},             {"rows", rows},         {"wall_time_s", t.wall_time_s}};
}

inline std::string ablation_to_text(const AblationTable& t) {
    std::ostringstream os;
    char line[200];
    os << "suite: " << t.suite << "  (seeds: " << t.seeds.size() << ", steps: " << t.steps
       << ")\n";
    std::snprintf(line, sizeof(line), "%-10s %8s %8s %10s %10s %10s\n", "variant", "mIoU", "IoU",
                  "mIoU.dyn", "mIoU.stat", "loss");
    os << line;
    for (const auto& r : t.rows) {
        std::snprintf(line, sizeof(line), "%-10s %8.4f %8.4f %10.4f %10.4f %10.5f\n",
                      r.variant.c_str(), r.miou, r.iou, r.miou_dynamic, r.miou_static,
                      r.final_loss);
        os << line;
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Grid exports: CSV and per-slice PGM heatmaps
// ---------------------------------------------------------------------------

inline std::string grid_to_csv(const VoxelGrid& grid, const SemanticTaxonomy& taxonomy) {
    std::ostringstream os;
    os << "ix,iy,iz,class_id,class_name\n";
    for (int iz = 0; iz < grid.dims.z(); ++iz)
        for (int iy = 0; iy < grid.dims.y(); ++iy)
            for (int ix = 0; ix < grid.dims.x(); ++ix) {
                const int c = grid.at(ix, iy, iz);
                os << ix << ',' << iy << ',' << iz << ',' << c << ','
                   << taxonomy.class_names[static_cast<size_t>(c)] << '\n';
            }
    return os.str();
}

/// One P2 grayscale image per z-slice; class ids are spread over [0, 255]
/// (empty class maps to 0).
inline std::string grid_slice_to_pgm(const VoxelGrid& grid, const SemanticTaxonomy& taxonomy,
                                     int iz) {
    const int d = taxonomy.num_classes();
    std::ostringstream os;
    os << "P2\n" << grid.dims.x() << ' ' << grid.dims.y() << "\n255\n";
    for (int iy = 0; iy < grid.dims.y(); ++iy) {
        for (int ix = 0; ix < grid.dims.x(); ++ix) {
            const int c = grid.at(ix, iy, iz);
            int level = 0;
            if (c != taxonomy.empty_class) {
                const int rank = c < taxonomy.empty_class ? c + 1 : c; // 1..d-1
                level = rank * 255 / (d - 1);
            }
            os << level << (ix + 1 == grid.dims.x() ? '\n' : ' ');
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << content;
    if (!f) throw IoError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline json read_json_file(const std::string& path) {
    try {
        return json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("json parse error in " + path + ": " + e.what());
    }
}

inline void write_json_file(const std::string& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

} // namespace gsocc
