#pragma once

#include <string>
#include <vector>

#include "viewalign/autodiff.hpp"
#include "viewalign/rng.hpp"
#include "viewalign/tensor.hpp"

namespace viewalign {

using ParamId = int;

// Named, ordered parameter registry. Registration order is the checkpoint
// and initialization order, so it must be deterministic.
class ParamStore {
public:
    ParamId add(std::string name, Tensor value) {
        entries_.push_back({std::move(name), std::move(value)});
        return static_cast<ParamId>(entries_.size() - 1);
    }

    size_t count() const { return entries_.size(); }
    Tensor& value(ParamId id) { return entries_[static_cast<size_t>(id)].value; }
    const Tensor& value(ParamId id) const { return entries_[static_cast<size_t>(id)].value; }
    const std::string& name(ParamId id) const { return entries_[static_cast<size_t>(id)].name; }

    // One leaf per parameter, in registration order.
    std::vector<Var> bind(Tape& tape) const {
        std::vector<Var> vars;
        vars.reserve(entries_.size());
        for (const auto& e : entries_) vars.push_back(tape.leaf(e.value));
        return vars;
    }

    int64_t total_scalars() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

private:
    struct Entry {
        std::string name;
        Tensor value;
    };
    std::vector<Entry> entries_;
};

// Uniform init scaled by fan-in, the convention for every learnable map here.
inline Tensor fan_in_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

struct Conv2dLayer {
    ParamId w = -1, b = -1;
    int stride = 1, pad = 1;

    static Conv2dLayer make(ParamStore& store, const std::string& name, int cin, int cout,
                            int k, Rng& rng, bool zero_init = false, int stride = 1,
                            int pad = 1) {
        Conv2dLayer l;
        l.stride = stride;
        l.pad = pad;
        Tensor weight = zero_init ? Tensor::zeros({cout, cin, k, k})
                                  : fan_in_uniform({cout, cin, k, k},
                                                   static_cast<int64_t>(cin) * k * k, rng);
        l.w = store.add(name + ".weight", std::move(weight));
        l.b = store.add(name + ".bias", Tensor::zeros({cout}));
        return l;
    }

    Var forward(Tape& tape, const std::vector<Var>& p, Var x) const {
        return tape.conv2d(x, p[static_cast<size_t>(w)], p[static_cast<size_t>(b)], stride, pad);
    }
};

struct LinearLayer {
    ParamId w = -1, b = -1;

    static LinearLayer make(ParamStore& store, const std::string& name, int in, int out,
                            Rng& rng, bool zero_init = false, bool bias = true) {
        LinearLayer l;
        Tensor weight =
            zero_init ? Tensor::zeros({out, in}) : fan_in_uniform({out, in}, in, rng);
        l.w = store.add(name + ".weight", std::move(weight));
        if (bias) l.b = store.add(name + ".bias", Tensor::zeros({out}));
        return l;
    }

    Var forward(Tape& tape, const std::vector<Var>& p, Var x) const {
        const Var bias = b >= 0 ? p[static_cast<size_t>(b)] : Var{};
        return tape.linear(x, p[static_cast<size_t>(w)], bias);
    }
};

struct GroupNormLayer {
    ParamId gamma = -1, beta = -1;
    int groups = 8;

    static GroupNormLayer make(ParamStore& store, const std::string& name, int channels,
                               int groups) {
        GroupNormLayer l;
        l.groups = groups;
        l.gamma = store.add(name + ".gamma", Tensor::full({channels}, 1.0));
        l.beta = store.add(name + ".beta", Tensor::zeros({channels}));
        return l;
    }

    Var forward(Tape& tape, const std::vector<Var>& p, Var x) const {
        return tape.group_norm(x, p[static_cast<size_t>(gamma)], p[static_cast<size_t>(beta)],
                               groups);
    }
};

}  // namespace viewalign
