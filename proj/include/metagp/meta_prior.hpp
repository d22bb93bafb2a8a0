#pragma once

#include <vector>

#include "metagp/kernels.hpp"
#include "metagp/rng.hpp"
#include "metagp/tensor.hpp"

namespace metagp {

enum class Activation { Relu, Tanh };
enum class BiasMode { None, BiasUnit };

// Layer widths [H_0 .. H_L]. Biases, when enabled, are weights out of a
// per-layer constant bias unit that carries its own latent vector.
struct Architecture {
    std::vector<int> layer_widths;
    Activation activation = Activation::Relu;
    BiasMode bias_mode = BiasMode::BiasUnit;

    int num_weight_layers() const { return static_cast<int>(layer_widths.size()) - 1; }
    int fan_in(int l) const {
        return layer_widths[l] + (bias_mode == BiasMode::BiasUnit ? 1 : 0);
    }
    int layer_weight_count(int l) const { return fan_in(l) * layer_widths[l + 1]; }
    int weight_count() const;
    // units carrying latents: every real unit plus one bias unit per
    // non-output layer
    int unit_count() const;
    // global id of unit i in node layer l (i == H_l addresses the bias unit)
    int unit_id(int l, int i) const;
    int weight_offset(int l) const;  // flat index of the first weight in layer l
    void validate() const;
};

// Fixed layer-major (l, then input unit i, then output unit j) enumeration of
// weights; identical across calls for a fixed architecture.
struct CodeIndex {
    std::vector<int> in_unit;   // weight_count entries, global unit ids
    std::vector<int> out_unit;  // weight_count entries

    static CodeIndex build(const Architecture& arch);
};

struct UnitLatents {
    TensorPtr z;  // unit_count x D_z
    int d_z = 2;

    static UnitLatents standard_normal(const Architecture& arch, int d_z, RngStream& rng);
};

struct WeightCodeTable {
    TensorPtr table;  // weight_count x 2*D_z
};

enum class AuxNonlin { Identity, Tanh };

// eps_n = g(V x_n); identity requires D_aux == D_x (low-dimensional
// passthrough with V pinned to I). Entries of a learned V carry a standard
// normal prior.
struct AuxTransform {
    AuxNonlin g = AuxNonlin::Identity;
    int d_aux = 0;
    int d_x = 0;

    static AuxTransform identity(int d_x);
    static AuxTransform learned_tanh(int d_aux, int d_x);
    bool learned() const { return g != AuxNonlin::Identity; }
    // v is d_aux x d_x (ignored for identity); x is d_x x 1; result 1 x d_aux
    TensorPtr apply(const TensorPtr& v, const TensorPtr& x) const;
};

WeightCodeTable build_codes(const Architecture& arch, const UnitLatents& z);

// extends every row of the table by the same transformed input
TensorPtr build_local_codes(const WeightCodeTable& table, const TensorPtr& x,
                            const AuxTransform& aux, const TensorPtr& v);

// Draws z ~ p(z) once, instantiates K_w over the codes and returns
// n_function_samples vectors from N(0, K_w + sigma_w^2 I).
std::vector<Vec> sample_prior_weights(const Architecture& arch, const KernelSpec& spec, int d_z,
                                      std::uint64_t seed, int n_function_samples);

// Local variant: joint draw across a grid of inputs with the separable
// covariance K_w(codes) x K_aux(inputs); column n holds the weights at xs[n].
// Weight noise is added independently per entry.
std::vector<Mat> sample_prior_weights_local(const Architecture& arch, const KernelSpec& spec,
                                            int d_z, const Mat& xs, std::uint64_t seed,
                                            int n_function_samples);

}  // namespace metagp
