#pragma once

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtpose/config.hpp"
#include "mtpose/io.hpp"
#include "mtpose/network.hpp"

namespace mtpose {

// PRKT1 weight files:
//
//   PRKT1
//   meta <key>=<value>            (any number)
//   tensor <name> <op> <d0>x<d1>  (one per tensor, "scalar" for rank 0)
//   end
//   <float32 little-endian payloads in header order>

struct NamedTensor {
    std::string name;
    std::string op;
    Shape shape;
    std::vector<float> data;
    bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
    KeyValueConfig meta;
    std::vector<NamedTensor> tensors;

    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

inline constexpr const char* kCheckpointMagic = "PRKT1";

namespace detail {

inline std::string dims_str(const Shape& s) {
    if (s.empty()) return "scalar";
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

inline Shape parse_dims(const std::string& text, const std::string& path, long long offset) {
    if (text == "scalar") return {};
    Shape s;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            std::size_t pos = 0;
            const int d = std::stoi(part, &pos);
            if (pos != part.size() || d < 0) throw std::invalid_argument("bad");
            s.push_back(d);
        } catch (const std::exception&) {
            throw std::runtime_error(path + ": bad tensor dimensions '" + text + "' at byte offset " +
                                     std::to_string(offset));
        }
    }
    return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
    out << kCheckpointMagic << "\n";
    for (const auto& [k, v] : ck.meta.values()) {
        if (k.find_first_of(" \n=") != std::string::npos || v.find('\n') != std::string::npos) {
            throw std::invalid_argument("checkpoint meta entry '" + k + "' cannot be stored");
        }
        out << "meta " << k << "=" << v << "\n";
    }
    for (const auto& t : ck.tensors) {
        if (shape_numel(t.shape) != t.data.size()) {
            throw std::invalid_argument("checkpoint tensor " + t.name + ": shape " + shape_str(t.shape) +
                                        " does not match " + std::to_string(t.data.size()) + " values");
        }
        out << "tensor " << t.name << " " << t.op << " " << detail::dims_str(t.shape) << "\n";
    }
    out << "end\n";
    for (const auto& t : ck.tensors) detail::write_le(out, t.data);
    if (!out) throw std::runtime_error("write failed for checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    detail::expect_magic(in, kCheckpointMagic, path);
    detail::HeaderReader r{in, path, "checkpoint"};
    Checkpoint ck;
    while (true) {
        const auto offset = static_cast<long long>(in.tellg());
        const std::string line = r.line();
        if (line == "end") break;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "meta") {
            std::string rest;
            std::getline(ls, rest);
            const auto b = rest.find_first_not_of(' ');
            const auto eq = rest.find('=');
            if (b == std::string::npos || eq == std::string::npos) r.fail("malformed meta line", offset);
            ck.meta.set(rest.substr(b, eq - b), rest.substr(eq + 1));
        } else if (kind == "tensor") {
            NamedTensor t;
            std::string dims, extra;
            if (!(ls >> t.name >> t.op >> dims) || (ls >> extra)) r.fail("malformed tensor line", offset);
            t.shape = detail::parse_dims(dims, path, offset);
            ck.tensors.push_back(std::move(t));
        } else {
            r.fail("unknown header record '" + kind + "'", offset);
        }
    }
    for (auto& t : ck.tensors) t.data = detail::read_le<float>(in, shape_numel(t.shape), "tensor " + t.name, path);
    detail::expect_eof(in, path);
    return ck;
}

/// Network weights (running statistics included) plus its configuration.
inline Checkpoint network_checkpoint(const Network<float>& net) {
    Checkpoint ck;
    const auto kv = net.config().to_kv();
    for (const auto& [k, v] : kv.values()) ck.meta.set("net." + k, v);
    ck.meta.set("net.decoupled", net.decoupled() ? 1 : 0);
    ck.meta.set("net.pyramids_built", net.pyramids_built());
    for (const auto& p : net.params()) {
        ck.tensors.push_back({p.name, p.op, p.tensor.shape(), std::vector<float>(p.tensor.data().begin(), p.tensor.data().end())});
    }
    return ck;
}

inline NetworkConfig checkpoint_network_config(const Checkpoint& ck) {
    KeyValueConfig kv;
    bool any = false;
    for (const auto& [k, v] : ck.meta.values()) {
        if (k.rfind("net.", 0) == 0) {
            kv.set(k.substr(4), v);
            any = true;
        }
    }
    if (!any) throw std::runtime_error("checkpoint carries no network configuration");
    return NetworkConfig::from_kv(kv);
}

/// Copies checkpoint weights into `net`. The configurations, decoupling
/// state and every tensor name/shape must match.
inline void restore_network(Network<float>& net, const Checkpoint& ck) {
    const auto cfg = checkpoint_network_config(ck);
    if (!(cfg == net.config())) {
        throw std::invalid_argument("checkpoint/config mismatch: checkpoint holds\n" + cfg.to_kv().to_string() +
                                    "network expects\n" + net.config().to_kv().to_string());
    }
    const bool decoupled = ck.meta.get_bool("net.decoupled", false);
    if (decoupled && !net.decoupled()) net.decouple_action_poses();
    if (!decoupled && net.decoupled()) {
        throw std::invalid_argument("checkpoint/config mismatch: network is decoupled but checkpoint is not");
    }
    const int built = ck.meta.get_int("net.pyramids_built", cfg.pyramids);
    if (built != net.pyramids_built()) {
        throw std::invalid_argument("checkpoint/config mismatch: checkpoint has " + std::to_string(built) +
                                    " pyramids, network has " + std::to_string(net.pyramids_built()));
    }
    for (auto& p : net.params()) {
        const auto* t = ck.find(p.name);
        if (!t) throw std::invalid_argument("checkpoint/config mismatch: missing tensor " + p.name);
        if (t->shape != p.tensor.shape()) {
            throw std::invalid_argument("checkpoint/config mismatch: tensor " + p.name + " has shape " +
                                        shape_str(t->shape) + ", network expects " + shape_str(p.tensor.shape()));
        }
        std::copy(t->data.begin(), t->data.end(), p.tensor.data().begin());
    }
}

inline Network<float> network_from_checkpoint(const Checkpoint& ck) {
    const auto cfg = checkpoint_network_config(ck);
    Network<float> net(cfg, 0, ck.meta.get_int("net.pyramids_built", cfg.pyramids));
    restore_network(net, ck);
    return net;
}

}  // namespace mtpose
