#include "cmlp/analysis.hpp"

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <sstream>

#include "cmlp/error.hpp"
#include "cmlp/image_io.hpp"
#include "cmlp/persist.hpp"

namespace cmlp {
namespace analysis {

namespace {

// Closed-form per-layer costs. Extent arithmetic matches ops::conv_geometry:
// floor((in + 2p - k) / s) + 1.
std::size_t out_ext(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
    return (in + 2 * p - k) / s + 1;
}

std::size_t conv_params(std::size_t cin, std::size_t cout, std::size_t k, bool bias,
                        std::size_t groups = 1) {
    return cout * (cin / groups) * k * k + (bias ? cout : 0);
}

std::size_t conv_macs(std::size_t cin, std::size_t cout, std::size_t k,
                      std::size_t ho, std::size_t wo, std::size_t groups = 1) {
    return cout * (cin / groups) * k * k * ho * wo;
}

std::size_t linear_params(std::size_t cin, std::size_t cout) {
    return cin * cout + cout;
}

std::size_t linear_macs(std::size_t cin, std::size_t cout, std::size_t positions) {
    return cin * cout * positions;
}

std::string shape3(std::size_t c, std::size_t h, std::size_t w) {
    return std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

void mlp_block_rows(std::vector<CostRow>& rows, const std::string& p, std::size_t c,
                    std::size_t ratio, bool dw, std::size_t h, std::size_t w) {
    const std::size_t hidden = ratio * c;
    const std::size_t pos = h * w;
    rows.push_back({p + ".norm1", "norm", shape3(c, h, w), 2 * c, 0});
    rows.push_back({p + ".mlp1.fc1", "linear", shape3(hidden, h, w),
                    linear_params(c, hidden), linear_macs(c, hidden, pos)});
    rows.push_back({p + ".mlp1.fc2", "linear", shape3(c, h, w),
                    linear_params(hidden, c), linear_macs(hidden, c, pos)});
    if (dw) {
        rows.push_back({p + ".dwconv", "conv", shape3(c, h, w),
                        conv_params(c, c, 3, true, c), conv_macs(c, c, 3, h, w, c)});
    }
    rows.push_back({p + ".norm2", "norm", shape3(c, h, w), 2 * c, 0});
    rows.push_back({p + ".mlp2.fc1", "linear", shape3(hidden, h, w),
                    linear_params(c, hidden), linear_macs(c, hidden, pos)});
    rows.push_back({p + ".mlp2.fc2", "linear", shape3(c, h, w),
                    linear_params(hidden, c), linear_macs(hidden, c, pos)});
}

} // namespace

std::size_t CostReport::total_params() const {
    std::size_t n = 0;
    for (const CostRow& r : rows) n += r.params;
    return n;
}

std::size_t CostReport::total_macs() const {
    std::size_t n = 0;
    for (const CostRow& r : rows) n += r.macs;
    return n;
}

CostReport count_macs(const ModelConfig& config, std::size_t h_in, std::size_t w_in) {
    config.validate();
    if (h_in % 32 != 0 || w_in % 32 != 0) {
        throw GeometryError("cost model: spatial extents " + std::to_string(h_in) + "x" +
                            std::to_string(w_in) + " must be divisible by 32");
    }

    CostReport rep;
    rep.h = h_in;
    rep.w = w_in;
    std::vector<CostRow>& rows = rep.rows;

    const std::size_t c1 = config.channels[0];
    std::size_t h = h_in, w = w_in;

    if (config.use_conv_stage) {
        std::size_t tin = 3;
        const std::size_t strides[3] = {2, 1, 1};
        for (std::size_t i = 0; i < 3; ++i) {
            const std::size_t tc = config.tokenizer_channels[i];
            h = out_ext(h, 3, strides[i], 1);
            w = out_ext(w, 3, strides[i], 1);
            const std::string tag = std::to_string(i + 1);
            rows.push_back({"tokenizer.conv" + tag, "conv", shape3(tc, h, w),
                            conv_params(tin, tc, 3, false), conv_macs(tin, tc, 3, h, w)});
            rows.push_back({"tokenizer.bn" + tag, "norm", shape3(tc, h, w), 2 * tc, 0});
            tin = tc;
        }
        h = out_ext(h, 3, 2, 1);
        w = out_ext(w, 3, 2, 1);
        rows.push_back({"tokenizer.pool", "pool", shape3(c1, h, w), 0, 0});

        const std::size_t hidden = config.conv_stage_hidden;
        for (std::size_t b = 0; b < config.conv_stage_blocks; ++b) {
            const std::string p = "conv_stage.block" + std::to_string(b);
            rows.push_back({p + ".conv1", "conv", shape3(hidden, h, w),
                            conv_params(c1, hidden, 1, false), conv_macs(c1, hidden, 1, h, w)});
            rows.push_back({p + ".bn1", "norm", shape3(hidden, h, w), 2 * hidden, 0});
            rows.push_back({p + ".conv2", "conv", shape3(hidden, h, w),
                            conv_params(hidden, hidden, 3, false), conv_macs(hidden, hidden, 3, h, w)});
            rows.push_back({p + ".bn2", "norm", shape3(hidden, h, w), 2 * hidden, 0});
            rows.push_back({p + ".conv3", "conv", shape3(c1, h, w),
                            conv_params(hidden, c1, 1, false), conv_macs(hidden, c1, 1, h, w)});
            rows.push_back({p + ".bn3", "norm", shape3(c1, h, w), 2 * c1, 0});
        }
    } else {
        h = h_in / 4;
        w = w_in / 4;
        rows.push_back({"patch_embed", "conv", shape3(c1, h, w),
                        conv_params(3, c1, 4, true), conv_macs(3, c1, 4, h, w)});
        for (std::size_t b = 0; b < config.conv_stage_blocks; ++b) {
            mlp_block_rows(rows, "stage0.block" + std::to_string(b), c1,
                           config.mlp_ratio, config.use_dw_conv, h, w);
        }
    }

    std::size_t cprev = c1;
    for (std::size_t s = 1; s <= 3; ++s) {
        const std::size_t cs = config.channels[s];
        const std::string stage = "stage" + std::to_string(s);
        if (config.use_conv_downsample) {
            h = out_ext(h, 3, 2, 1);
            w = out_ext(w, 3, 2, 1);
            rows.push_back({stage + ".downsample", "conv", shape3(cs, h, w),
                            conv_params(cprev, cs, 3, true), conv_macs(cprev, cs, 3, h, w)});
        } else {
            h /= 2;
            w /= 2;
            rows.push_back({stage + ".downsample", "merge", shape3(cs, h, w),
                            linear_params(4 * cprev, cs), linear_macs(4 * cprev, cs, h * w)});
        }
        for (std::size_t b = 0; b < config.stage_depths[s - 1]; ++b) {
            mlp_block_rows(rows, stage + ".block" + std::to_string(b), cs,
                           config.mlp_ratio, config.use_dw_conv, h, w);
        }
        cprev = cs;
    }

    rows.push_back({"head", "linear", std::to_string(config.num_classes),
                    linear_params(config.channels[3], config.num_classes), 0});
    return rep;
}

template <typename T>
CostReport count_params(const Model<T>& model) {
    CostReport rep = count_macs(model.config(), 224, 224);
    const std::size_t analytic = rep.total_params();
    const std::size_t registered = model.registry().param_element_count();
    if (analytic != registered) {
        throw StateError("cost model: analytic parameter total " + std::to_string(analytic) +
                         " does not match the registry's " + std::to_string(registered));
    }
    return rep;
}

template <typename T>
std::string summarize(const Model<T>& model, std::size_t h, std::size_t w) {
    const ModelConfig& cfg = model.config();
    (void)count_params(model); // registry cross-check; throws on drift
    const CostReport at_res = count_macs(cfg, h, w);

    struct Group {
        std::string name;
        std::string blocks = "-";
        std::string channels;
        std::string out_shape;
        std::size_t params = 0;
        std::size_t macs = 0;
    };
    std::vector<Group> groups;
    for (const CostRow& row : at_res.rows) {
        const std::size_t dot = row.name.find('.');
        const std::string g = dot == std::string::npos ? row.name : row.name.substr(0, dot);
        if (groups.empty() || groups.back().name != g) {
            Group fresh;
            fresh.name = g;
            groups.push_back(fresh);
        }
        Group& back = groups.back();
        back.params += row.params;
        back.macs += row.macs;
        back.out_shape = row.out_shape;
    }
    for (Group& g : groups) {
        if (g.name == "conv_stage" || g.name == "stage0") {
            g.blocks = std::to_string(cfg.conv_stage_blocks);
        } else if (g.name.size() == 6 && g.name.compare(0, 5, "stage") == 0) {
            g.blocks = std::to_string(cfg.stage_depths[std::size_t(g.name[5] - '1')]);
        }
        g.channels = g.out_shape.substr(0, g.out_shape.find('x'));
    }

    const char* header[6] = {"stage", "blocks", "channels", "output", "params", "macs"};
    std::size_t width[6];
    for (int i = 0; i < 6; ++i) width[i] = std::string(header[i]).size();
    const std::string total_params = std::to_string(at_res.total_params());
    const std::string total_macs = std::to_string(at_res.total_macs());
    for (const Group& g : groups) {
        width[0] = std::max(width[0], g.name.size());
        width[1] = std::max(width[1], g.blocks.size());
        width[2] = std::max(width[2], g.channels.size());
        width[3] = std::max(width[3], g.out_shape.size());
        width[4] = std::max(width[4], std::to_string(g.params).size());
        width[5] = std::max(width[5], std::to_string(g.macs).size());
    }
    width[4] = std::max(width[4], total_params.size());
    width[5] = std::max(width[5], total_macs.size());

    std::ostringstream out;
    out << cfg.variant << " @ 3x" << h << "x" << w << "\n";
    auto line = [&](const std::string& a, const std::string& b, const std::string& c,
                    const std::string& d, const std::string& e, const std::string& f) {
        out << std::left << std::setw(int(width[0])) << a << "  "
            << std::right << std::setw(int(width[1])) << b << "  "
            << std::setw(int(width[2])) << c << "  "
            << std::left << std::setw(int(width[3])) << d << "  "
            << std::right << std::setw(int(width[4])) << e << "  "
            << std::setw(int(width[5])) << f << "\n";
    };
    line(header[0], header[1], header[2], header[3], header[4], header[5]);
    for (const Group& g : groups) {
        line(g.name, g.blocks, g.channels, g.out_shape,
             std::to_string(g.params), std::to_string(g.macs));
    }
    line("total", "", "", "", total_params, total_macs);
    return out.str();
}

std::string to_csv(const CostReport& report) {
    std::string out = "name,kind,out_shape,params,macs\n";
    for (const CostRow& r : report.rows) {
        out += r.name + "," + r.kind + "," + r.out_shape + "," +
               std::to_string(r.params) + "," + std::to_string(r.macs) + "\n";
    }
    return out;
}

namespace {

// Zero-range maps carry no contrast and normalize to all zeros rather than
// dividing by zero.
template <typename T>
Tensor<T> min_max_normalized(const Tensor<T>& plane) {
    Tensor<T> out = plane;
    T lo = std::numeric_limits<T>::max();
    T hi = std::numeric_limits<T>::lowest();
    for (std::size_t i = 0; i < plane.size(); ++i) {
        lo = std::min(lo, plane[i]);
        hi = std::max(hi, plane[i]);
    }
    if (!(hi > lo)) {
        out.fill(T(0));
        return out;
    }
    const T span = hi - lo;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (out[i] - lo) / span;
    return out;
}

} // namespace

template <typename T>
std::vector<Tensor<T>> export_feature_maps(Model<T>& model, const Tensor<T>& image,
                                           int stage, Reduce reduce,
                                           const std::string& out_dir, std::size_t k) {
    if (stage < 1 || stage > 4) {
        throw ConfigError("feature export: stage must be between 1 and 4, got " +
                          std::to_string(stage));
    }
    if (image.rank() != 4 || image.extent(0) != 1) {
        throw ShapeError("feature export: expected a single [1,3,H,W] image, got " +
                         image.shape_string());
    }

    const FeaturePyramid<T> pyr = model.forward_pyramid(image, Mode::eval);
    const Tensor<T>& f = stage == 1 ? pyr.f1 : stage == 2 ? pyr.f2
                       : stage == 3 ? pyr.f3 : pyr.f4;
    const std::size_t c = f.extent(1), fh = f.extent(2), fw = f.extent(3);

    std::filesystem::create_directories(out_dir);
    std::vector<Tensor<T>> maps;
    auto emit = [&](const std::string& tag, const Tensor<T>& plane) {
        Tensor<T> norm = min_max_normalized(plane);
        image::write_pgm(out_dir + "/" + tag + ".pgm", norm);
        persist::save_tensor(out_dir + "/" + tag + ".cmlt", tag, norm);
        maps.push_back(std::move(norm));
    };

    const std::string base = "stage" + std::to_string(stage) + "_";
    if (reduce == Reduce::mean) {
        Tensor<T> m({fh, fw});
        for (std::size_t y = 0; y < fh; ++y) {
            for (std::size_t x = 0; x < fw; ++x) {
                T acc = 0;
                for (std::size_t ci = 0; ci < c; ++ci) acc += f(0, ci, y, x);
                m(y, x) = acc / T(c);
            }
        }
        emit(base + "mean", m);
    } else {
        const std::size_t n = std::min(k, c);
        for (std::size_t ci = 0; ci < n; ++ci) {
            Tensor<T> m({fh, fw});
            for (std::size_t y = 0; y < fh; ++y) {
                for (std::size_t x = 0; x < fw; ++x) m(y, x) = f(0, ci, y, x);
            }
            emit(base + "ch" + std::to_string(ci), m);
        }
    }
    return maps;
}

template CostReport count_params<float>(const Model<float>&);
template CostReport count_params<double>(const Model<double>&);
template std::string summarize<float>(const Model<float>&, std::size_t, std::size_t);
template std::string summarize<double>(const Model<double>&, std::size_t, std::size_t);
template std::vector<Tensor<float>> export_feature_maps<float>(
    Model<float>&, const Tensor<float>&, int, Reduce, const std::string&, std::size_t);
template std::vector<Tensor<double>> export_feature_maps<double>(
    Model<double>&, const Tensor<double>&, int, Reduce, const std::string&, std::size_t);

} // namespace analysis
} // namespace cmlp
