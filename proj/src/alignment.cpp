#include "viewalign/alignment.hpp"

#include <cmath>

#include "viewalign/errors.hpp"

namespace viewalign {

AttentionParams AttentionParams::init(int channels, int attention_dim, Rng& rng) {
    if (channels % 4 != 0)
        throw Error("AttentionParams: channel count must be divisible by 4 for the encoding");
    AttentionParams p;
    p.attention_dim = attention_dim;
    p.pe.dim = channels;
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    auto fan_in_uniform = [&](int64_t rows, int64_t cols) {
        Tensor t({rows, cols});
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
        return t;
    };
    p.w_query = fan_in_uniform(attention_dim, channels);
    p.w_key = fan_in_uniform(attention_dim, channels);
    p.w_value = fan_in_uniform(attention_dim, channels);
    p.w_out = Tensor::zeros({channels, attention_dim});
    return p;
}

namespace {

void matvec(const Tensor& w, const double* x, double* out) {
    const int64_t rows = w.dim(0), cols = w.dim(1);
    for (int64_t r = 0; r < rows; ++r) {
        const double* wr = w.data() + r * cols;
        double s = 0.0;
        for (int64_t c = 0; c < cols; ++c) s += wr[c] * x[c];
        out[r] = s;
    }
}

}  // namespace

void project_qkv(const std::vector<double>& query_feat, const std::vector<double>& cand_feat,
                 Vec2 delta, const AttentionParams& params, std::vector<double>& q,
                 std::vector<double>& k, std::vector<double>& v) {
    const int64_t c = params.w_query.dim(1);
    const int64_t d = params.w_query.dim(0);
    if (static_cast<int64_t>(query_feat.size()) != c ||
        static_cast<int64_t>(cand_feat.size()) != c)
        throw DimensionMismatch("project_qkv: feature dimension does not match parameters");
    if (params.pe.dim != static_cast<int>(c))
        throw DimensionMismatch("project_qkv: encoding dim must equal channel count");

    std::vector<double> pe = positional_encoding(delta, params.pe);
    std::vector<double> keyed(static_cast<size_t>(c));
    for (int64_t i = 0; i < c; ++i) keyed[static_cast<size_t>(i)] = cand_feat[i] + pe[i];

    q.assign(static_cast<size_t>(d), 0.0);
    k.assign(static_cast<size_t>(d), 0.0);
    v.assign(static_cast<size_t>(d), 0.0);
    matvec(params.w_query, query_feat.data(), q.data());
    matvec(params.w_key, keyed.data(), k.data());
    matvec(params.w_value, keyed.data(), v.data());
}

std::vector<double> attention_weights(const std::vector<double>& q,
                                      const std::vector<std::vector<double>>& keys) {
    if (keys.empty()) throw EmptyCandidateSet("attention_weights: no candidates");
    const size_t d = q.size();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> logits(keys.size());
    double mx = -1e300;
    for (size_t i = 0; i < keys.size(); ++i) {
        if (keys[i].size() != d)
            throw DimensionMismatch("attention_weights: key dimension mismatch");
        double dot = 0.0;
        for (size_t j = 0; j < d; ++j) dot += q[j] * keys[i][j];
        logits[i] = dot * scale;
        mx = std::max(mx, logits[i]);
    }
    double z = 0.0;
    for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
    }
    for (double& l : logits) l /= z;
    return logits;
}

std::vector<double> align_patch(
    const std::vector<double>& q,
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& candidates) {
    if (candidates.empty()) throw EmptyCandidateSet("align_patch: no candidates");
    std::vector<std::vector<double>> keys;
    keys.reserve(candidates.size());
    for (const auto& kv : candidates) keys.push_back(kv.first);
    const std::vector<double> alpha = attention_weights(q, keys);
    std::vector<double> out(candidates[0].second.size(), 0.0);
    for (size_t i = 0; i < candidates.size(); ++i) {
        const auto& v = candidates[i].second;
        if (v.size() != out.size())
            throw DimensionMismatch("align_patch: value dimension mismatch");
        for (size_t j = 0; j < out.size(); ++j) out[j] += alpha[i] * v[j];
    }
    return out;
}

AlignPlan build_align_plan(const ViewGraph& graph, const HomographySet& feature_homs, int height,
                           int width, const PosEncodingConfig& pe, const AlignConfig& cfg) {
    if (cfg.radius < 1) throw Error("build_align_plan: radius must be >= 1");
    for (const auto& [i, j] : graph.pairs)
        if (!feature_homs.has(i, j))
            throw MissingHomography("align plan: missing homography " + std::to_string(i) +
                                    " -> " + std::to_string(j));

    AlignPlan plan;
    plan.views = graph.num_views;
    plan.channels = pe.dim;
    plan.height = height;
    plan.width = width;
    plan.per_view.resize(static_cast<size_t>(graph.num_views));

    const int64_t hw = static_cast<int64_t>(height) * width;
    std::vector<double> pe_row(static_cast<size_t>(pe.dim));
    for (int i = 0; i < graph.num_views; ++i) {
        auto& pv = plan.per_view[static_cast<size_t>(i)];
        pv.seg.assign(static_cast<size_t>(hw) + 1, 0);
        std::vector<double> enc_flat;
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const int64_t pos = static_cast<int64_t>(y) * width + x;
                if (cfg.include_self) {
                    pv.cand_rows.push_back(static_cast<int64_t>(i) * hw + pos);
                    positional_encoding({0.0, 0.0}, pe, pe_row.data());
                    enc_flat.insert(enc_flat.end(), pe_row.begin(), pe_row.end());
                }
                for (int j : graph.neighbors[static_cast<size_t>(i)]) {
                    const auto cands = search_window_or_empty(feature_homs.get(i, j), x, y,
                                                              cfg.radius, height, width);
                    for (const auto& c : cands) {
                        pv.cand_rows.push_back(static_cast<int64_t>(j) * hw +
                                               static_cast<int64_t>(c.y) * width + c.x);
                        positional_encoding({c.dx, c.dy}, pe, pe_row.data());
                        enc_flat.insert(enc_flat.end(), pe_row.begin(), pe_row.end());
                    }
                }
                pv.seg[static_cast<size_t>(pos) + 1] =
                    static_cast<int64_t>(pv.cand_rows.size());
            }
        }
        pv.encodings = Tensor({static_cast<int64_t>(pv.cand_rows.size()), pe.dim},
                              std::move(enc_flat));
    }
    return plan;
}

std::vector<Var> cross_view_align(Tape& tape, const std::vector<Var>& view_feats,
                                  const AlignPlan& plan, Var w_query, Var w_key, Var w_value,
                                  Var w_out) {
    const int m = plan.views;
    if (static_cast<int>(view_feats.size()) != m)
        throw DimensionMismatch("cross_view_align: view count mismatch");
    const int64_t c = tape.val(view_feats[0]).dim(0);
    const int64_t h = tape.val(view_feats[0]).dim(1);
    const int64_t w = tape.val(view_feats[0]).dim(2);
    const double scale = 1.0 / std::sqrt(static_cast<double>(tape.val(w_query).dim(0)));

    std::vector<Var> rows(view_feats.size());
    for (size_t v = 0; v < view_feats.size(); ++v) rows[v] = tape.chw_to_rows(view_feats[v]);
    const Var stacked = tape.concat_rows(rows);

    std::vector<Var> out(view_feats.size());
    for (int i = 0; i < m; ++i) {
        const auto& pv = plan.per_view[static_cast<size_t>(i)];
        const Var gathered = tape.gather_rows(stacked, pv.cand_rows);
        const Var keyed = tape.add(gathered, tape.constant(pv.encodings));
        const Var q = tape.linear(rows[static_cast<size_t>(i)], w_query, Var{});
        const Var k = tape.linear(keyed, w_key, Var{});
        const Var v = tape.linear(keyed, w_value, Var{});
        const Var agg = tape.patch_attention(q, k, v, pv.seg, scale);
        const Var proj = tape.linear(agg, w_out, Var{});
        out[static_cast<size_t>(i)] =
            tape.add(view_feats[static_cast<size_t>(i)], tape.rows_to_chw(proj, c, h, w));
    }
    return out;
}

FeatureMap align_feature_map(const FeatureMap& x, const ViewGraph& graph,
                             const HomographySet& image_homs, const AttentionParams& params,
                             const AlignConfig& cfg) {
    if (x.data.rank() != 4) throw ShapeMismatch("align_feature_map: expected [M,C,H,W]");
    if (x.views() != graph.num_views)
        throw DimensionMismatch("align_feature_map: view count does not match graph");
    if (x.channels() != params.channels())
        throw DimensionMismatch("align_feature_map: channel count does not match parameters");

    const HomographySet scaled = image_homs.rescaled(x.resolution_scale);
    const AlignPlan plan =
        build_align_plan(graph, scaled, x.height(), x.width(), params.pe, cfg);

    Tape tape(/*grad_enabled=*/false);
    const Var wq = tape.constant(params.w_query);
    const Var wk = tape.constant(params.w_key);
    const Var wv = tape.constant(params.w_value);
    const Var wo = tape.constant(params.w_out);

    const int64_t c = x.channels(), h = x.height(), w = x.width();
    const int64_t stride = c * h * w;
    std::vector<Var> feats;
    feats.reserve(static_cast<size_t>(x.views()));
    for (int v = 0; v < x.views(); ++v) {
        Tensor t({c, h, w});
        std::copy(x.data.data() + v * stride, x.data.data() + (v + 1) * stride, t.data());
        feats.push_back(tape.constant(std::move(t)));
    }

    const auto aligned = cross_view_align(tape, feats, plan, wq, wk, wv, wo);

    FeatureMap out;
    out.resolution_scale = x.resolution_scale;
    out.data = Tensor(x.data.shape());
    for (int v = 0; v < x.views(); ++v) {
        const Tensor& t = tape.val(aligned[static_cast<size_t>(v)]);
        std::copy(t.data(), t.data() + stride, out.data.data() + v * stride);
    }
    return out;
}

}  // namespace viewalign
