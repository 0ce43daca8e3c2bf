// Copyright 2026 The tzm-lab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef TZM_MEMORY_HPP
#define TZM_MEMORY_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "tzm/isa.hpp"

namespace tzm {

enum class SecurityAttr : std::uint8_t { Secure, NSC, NonSecure };
enum class RegionKind : std::uint8_t { Flash, Sram, Mmio };
enum class AccessKind : std::uint8_t { Read, Write, Execute };

// CfiViolation is raised only by the monitor services of the defense layer.
enum class FaultKind : std::uint8_t { SecureFault, MemFault, UsageFault, HardFault, CfiViolation };

inline const char* attr_name(SecurityAttr a) {
    switch (a) {
    case SecurityAttr::Secure: return "Secure";
    case SecurityAttr::NSC: return "NSC";
    case SecurityAttr::NonSecure: return "NonSecure";
    }
    return "?";
}

inline const char* kind_name(RegionKind k) {
    switch (k) {
    case RegionKind::Flash: return "Flash";
    case RegionKind::Sram: return "Sram";
    case RegionKind::Mmio: return "Mmio";
    }
    return "?";
}

inline const char* fault_name(FaultKind f) {
    switch (f) {
    case FaultKind::SecureFault: return "SecureFault";
    case FaultKind::MemFault: return "MemFault";
    case FaultKind::UsageFault: return "UsageFault";
    case FaultKind::HardFault: return "HardFault";
    case FaultKind::CfiViolation: return "CfiViolation";
    }
    return "?";
}

struct Perms {
    bool read = false;
    bool write = false;
    bool execute = false;
    bool operator==(const Perms&) const = default;
};

struct Region {
    std::string name;
    std::uint32_t base = 0;
    std::uint32_t size = 0;
    SecurityAttr attr = SecurityAttr::Secure;
    Perms perms;
    RegionKind kind = RegionKind::Sram;

    std::uint64_t end() const { return std::uint64_t{base} + size; }
    bool contains(std::uint32_t addr) const { return addr >= base && addr < end(); }
    bool operator==(const Region&) const = default;
};

class ManifestError : public Error {
public:
    ManifestError(std::string field, const std::string& msg)
        : Error(field + ": " + msg), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

/// Thrown by read/write. The machine turns it into a FaultRecord.
class MemoryFault : public Error {
public:
    MemoryFault(FaultKind kind, std::uint32_t addr, const std::string& msg)
        : Error(msg), kind_(kind), addr_(addr) {}
    FaultKind kind() const { return kind_; }
    std::uint32_t addr() const { return addr_; }

private:
    FaultKind kind_;
    std::uint32_t addr_;
};

struct ManifestRegion {
    Region region;
    // A carve must sit inside one earlier non-carve region; loading splits the parent.
    bool carve = false;
    // Stack regions take their execute bit from MapManifest::stack_executable.
    bool stack = false;
    std::optional<std::string> blob;
};

struct MapManifest {
    std::vector<ManifestRegion> regions;
    bool stack_executable = true;
    std::filesystem::path base_dir;
};

namespace detail {

inline std::uint32_t parse_u32(const nlohmann::json& v, const std::string& field) {
    if (v.is_number_unsigned()) {
        const auto n = v.get<std::uint64_t>();
        if (n > 0xFFFFFFFFull) throw ManifestError(field, "value exceeds 32 bits");
        return static_cast<std::uint32_t>(n);
    }
    if (v.is_string()) {
        const auto s = v.get<std::string>();
        std::size_t used = 0;
        unsigned long long n = 0;
        try {
            n = std::stoull(s, &used, 0);
        } catch (const std::exception&) {
            throw ManifestError(field, "not a number: '" + s + "'");
        }
        if (used != s.size()) throw ManifestError(field, "trailing characters in '" + s + "'");
        if (n > 0xFFFFFFFFull) throw ManifestError(field, "value exceeds 32 bits");
        return static_cast<std::uint32_t>(n);
    }
    throw ManifestError(field, "expected hex string or unsigned integer");
}

template <typename E, std::size_t N>
E parse_enum(const nlohmann::json& v, const std::string& field,
             const std::array<std::pair<std::string_view, E>, N>& names) {
    if (!v.is_string()) throw ManifestError(field, "expected string");
    const auto s = v.get<std::string>();
    for (const auto& [n, e] : names)
        if (n == s) return e;
    throw ManifestError(field, "unknown value '" + s + "'");
}

inline Perms parse_perms(const nlohmann::json& v, const std::string& field) {
    if (!v.is_object()) throw ManifestError(field, "expected {read, write, execute}");
    Perms p;
    for (const auto& [key, val] : v.items()) {
        if (!val.is_boolean()) throw ManifestError(field + "." + key, "expected boolean");
        if (key == "read") p.read = val.get<bool>();
        else if (key == "write") p.write = val.get<bool>();
        else if (key == "execute") p.execute = val.get<bool>();
        else throw ManifestError(field + "." + key, "unknown permission");
    }
    return p;
}

inline std::size_t line_of(std::string_view text, std::size_t byte) {
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + byte, '\n'));
}

} // namespace detail

inline MapManifest parse_manifest(std::string_view text, std::filesystem::path base_dir = {}) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ManifestError("line " + std::to_string(detail::line_of(text, e.byte)), e.what());
    }
    if (!doc.is_object()) throw ManifestError("$", "expected object");
    MapManifest m;
    m.base_dir = std::move(base_dir);
    if (doc.contains("stack_executable")) {
        if (!doc["stack_executable"].is_boolean()) throw ManifestError("stack_executable", "expected boolean");
        m.stack_executable = doc["stack_executable"].get<bool>();
    }
    if (!doc.contains("regions")) return m;
    if (!doc["regions"].is_array()) throw ManifestError("regions", "expected array");

    static constexpr std::array<std::pair<std::string_view, SecurityAttr>, 3> kAttrs{
        {{"Secure", SecurityAttr::Secure}, {"NSC", SecurityAttr::NSC}, {"NonSecure", SecurityAttr::NonSecure}}};
    static constexpr std::array<std::pair<std::string_view, RegionKind>, 3> kKinds{
        {{"Flash", RegionKind::Flash}, {"Sram", RegionKind::Sram}, {"Mmio", RegionKind::Mmio}}};

    std::size_t i = 0;
    for (const auto& r : doc["regions"]) {
        const std::string at = "regions[" + std::to_string(i++) + "]";
        if (!r.is_object()) throw ManifestError(at, "expected object");
        for (const char* key : {"name", "base", "size", "attr", "perms", "kind"})
            if (!r.contains(key)) throw ManifestError(at + "." + key, "missing");
        ManifestRegion mr;
        if (!r["name"].is_string()) throw ManifestError(at + ".name", "expected string");
        mr.region.name = r["name"].get<std::string>();
        mr.region.base = detail::parse_u32(r["base"], at + ".base");
        mr.region.size = detail::parse_u32(r["size"], at + ".size");
        mr.region.attr = detail::parse_enum(r["attr"], at + ".attr", kAttrs);
        mr.region.kind = detail::parse_enum(r["kind"], at + ".kind", kKinds);
        mr.region.perms = detail::parse_perms(r["perms"], at + ".perms");
        for (const char* key : {"carve", "stack"}) {
            if (!r.contains(key)) continue;
            if (!r[key].is_boolean()) throw ManifestError(at + "." + key, "expected boolean");
            (std::string_view(key) == "carve" ? mr.carve : mr.stack) = r[key].get<bool>();
        }
        if (r.contains("blob")) {
            if (!r["blob"].is_string()) throw ManifestError(at + ".blob", "expected string");
            mr.blob = r["blob"].get<std::string>();
        }
        if (mr.region.size == 0) throw ManifestError(at + ".size", "must be > 0");
        if (mr.region.base % 4 || mr.region.size % 4) throw ManifestError(at, "base and size must be 4-byte aligned");
        if (mr.region.end() > 0x100000000ull) throw ManifestError(at, "region wraps the address space");
        m.regions.push_back(std::move(mr));
    }
    return m;
}

inline MapManifest load_manifest_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ManifestError(path.string(), "cannot open");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_manifest(ss.str(), path.parent_path());
}

/// The default SAM L11-like layout. Identical to data/default_map.json.
inline const char* default_manifest_json() {
    return R"({
  "stack_executable": true,
  "regions": [
    {"name": "secure_flash", "base": "0x00000000", "size": "0x8000", "attr": "Secure", "kind": "Flash",
     "perms": {"read": true, "write": false, "execute": true}},
    {"name": "nsc_flash", "base": "0x00007E00", "size": "0x200", "attr": "NSC", "kind": "Flash", "carve": true,
     "perms": {"read": true, "write": false, "execute": true}},
    {"name": "ns_flash", "base": "0x00008000", "size": "0x8000", "attr": "NonSecure", "kind": "Flash",
     "perms": {"read": true, "write": false, "execute": true}},
    {"name": "secure_sram", "base": "0x20000000", "size": "0x2000", "attr": "Secure", "kind": "Sram", "stack": true,
     "perms": {"read": true, "write": true, "execute": false}},
    {"name": "secure_ramcode", "base": "0x20000000", "size": "0x400", "attr": "Secure", "kind": "Sram", "carve": true,
     "perms": {"read": true, "write": true, "execute": true}},
    {"name": "ns_sram", "base": "0x20002000", "size": "0x2000", "attr": "NonSecure", "kind": "Sram", "stack": true,
     "perms": {"read": true, "write": true, "execute": false}},
    {"name": "ns_ramcode", "base": "0x20002000", "size": "0x400", "attr": "NonSecure", "kind": "Sram", "carve": true,
     "perms": {"read": true, "write": true, "execute": true}},
    {"name": "secure_uart", "base": "0x40000000", "size": "0x400", "attr": "Secure", "kind": "Mmio",
     "perms": {"read": true, "write": true, "execute": false}},
    {"name": "ns_uart", "base": "0x40000400", "size": "0x400", "attr": "NonSecure", "kind": "Mmio",
     "perms": {"read": true, "write": true, "execute": false}}
  ]
}
)";
}

inline MapManifest default_manifest(bool stack_executable = true) {
    auto m = parse_manifest(default_manifest_json());
    m.stack_executable = stack_executable;
    return m;
}

/// Handlers receive the offset from the region base.
struct MmioDevice {
    std::function<std::uint32_t(std::uint32_t offset, unsigned width)> read;
    std::function<void(std::uint32_t offset, unsigned width, std::uint32_t value)> write;
};

class MemoryMap {
public:
    struct Snapshot {
        std::vector<Bytes> backing;
    };

    MemoryMap() = default;

    /// Regions are sorted by base and must be pairwise disjoint.
    explicit MemoryMap(std::vector<Region> regions) : regions_(std::move(regions)) {
        std::sort(regions_.begin(), regions_.end(), [](const Region& a, const Region& b) { return a.base < b.base; });
        for (std::size_t i = 0; i < regions_.size(); ++i) {
            const auto& r = regions_[i];
            if (r.size == 0 || r.base % 4 || r.size % 4) throw ManifestError(r.name, "bad base/size");
            if (i > 0 && regions_[i - 1].end() > r.base)
                throw ManifestError(r.name, "overlaps region '" + regions_[i - 1].name + "'");
            const std::uint8_t fill = r.kind == RegionKind::Flash ? 0xFF : 0x00;
            backing_.push_back(r.kind == RegionKind::Mmio ? Bytes{} : Bytes(r.size, fill));
        }
        devices_.resize(regions_.size());
    }

    const std::vector<Region>& regions() const { return regions_; }

    const Region* find(std::uint32_t addr) const {
        const auto i = index_of(addr);
        return i ? &regions_[*i] : nullptr;
    }

    const Region* region(std::string_view name) const {
        for (const auto& r : regions_)
            if (r.name == name) return &r;
        return nullptr;
    }

    std::optional<SecurityAttr> attribution(std::uint32_t addr) const {
        const auto* r = find(addr);
        return r ? std::optional(r->attr) : std::nullopt;
    }

    /// nullopt means the access is allowed. NSC execute from NonSecure passes
    /// here; the SG check belongs to the machine.
    std::optional<FaultKind> check_access(SecurityAttr world, std::uint32_t addr, AccessKind kind) const {
        const auto* r = find(addr);
        if (!r) return FaultKind::MemFault;
        if (world == SecurityAttr::NonSecure) {
            if (r->attr == SecurityAttr::Secure) return FaultKind::SecureFault;
            if (r->attr == SecurityAttr::NSC && kind != AccessKind::Execute) return FaultKind::SecureFault;
        }
        const bool ok = kind == AccessKind::Read    ? r->perms.read
                        : kind == AccessKind::Write ? r->perms.write
                                                    : r->perms.execute;
        return ok ? std::nullopt : std::optional(FaultKind::MemFault);
    }

    std::uint32_t read(std::uint32_t addr, unsigned width) const {
        const auto i = locate(addr, width);
        const auto off = addr - regions_[i].base;
        if (regions_[i].kind == RegionKind::Mmio) {
            const auto& dev = devices_[i];
            return dev.read ? dev.read(off, width) : 0;
        }
        std::uint32_t v = 0;
        for (unsigned b = 0; b < width; ++b) v |= std::uint32_t{backing_[i][off + b]} << (8 * b);
        return v;
    }

    void write(std::uint32_t addr, unsigned width, std::uint32_t value) {
        const auto i = locate(addr, width);
        const auto off = addr - regions_[i].base;
        if (regions_[i].kind == RegionKind::Mmio) {
            if (devices_[i].write) devices_[i].write(off, width, value);
            return;
        }
        for (unsigned b = 0; b < width; ++b) backing_[i][off + b] = static_cast<std::uint8_t>(value >> (8 * b));
    }

    /// Host-side copy that ignores permissions and may span adjacent regions.
    void load(std::uint32_t addr, std::span<const std::uint8_t> bytes) {
        for (std::size_t k = 0; k < bytes.size(); ++k) {
            const auto a = static_cast<std::uint32_t>(addr + k);
            const auto i = index_of(a);
            if (!i || regions_[*i].kind == RegionKind::Mmio)
                throw MemoryFault(FaultKind::MemFault, a, "load outside backed memory at " + hex32(a));
            backing_[*i][a - regions_[*i].base] = bytes[k];
        }
    }

    Bytes dump(std::uint32_t addr, std::size_t n) const {
        Bytes out;
        out.reserve(n);
        for (std::size_t k = 0; k < n; ++k) out.push_back(static_cast<std::uint8_t>(read(addr + k, 1)));
        return out;
    }

    void attach(std::string_view region_name, MmioDevice dev) {
        for (std::size_t i = 0; i < regions_.size(); ++i)
            if (regions_[i].name == region_name) {
                if (regions_[i].kind != RegionKind::Mmio) throw Error("region '" + regions_[i].name + "' is not MMIO");
                devices_[i] = std::move(dev);
                return;
            }
        throw Error("no region named '" + std::string(region_name) + "'");
    }

    Snapshot snapshot() const { return {backing_}; }
    void restore(const Snapshot& s) { backing_ = s.backing; }

private:
    std::optional<std::size_t> index_of(std::uint32_t addr) const {
        auto it = std::upper_bound(regions_.begin(), regions_.end(), addr,
                                   [](std::uint32_t a, const Region& r) { return a < r.base; });
        if (it == regions_.begin()) return std::nullopt;
        --it;
        if (!it->contains(addr)) return std::nullopt;
        return static_cast<std::size_t>(it - regions_.begin());
    }

    std::size_t locate(std::uint32_t addr, unsigned width) const {
        if (width != 1 && width != 2 && width != 4) throw Error("bad access width");
        if (addr % width) throw MemoryFault(FaultKind::MemFault, addr, "misaligned access at " + hex32(addr));
        const auto i = index_of(addr);
        if (!i || std::uint64_t{addr} + width > regions_[*i].end())
            throw MemoryFault(FaultKind::MemFault, addr, "unmapped access at " + hex32(addr));
        return *i;
    }

    std::vector<Region> regions_;
    std::vector<Bytes> backing_;
    std::vector<MmioDevice> devices_;
};

namespace detail {

inline std::vector<Region> resolve_regions(const MapManifest& m) {
    std::vector<Region> out;
    for (std::size_t i = 0; i < m.regions.size(); ++i) {
        const auto& mr = m.regions[i];
        Region r = mr.region;
        if (mr.stack) r.perms.execute = m.stack_executable;
        const std::string at = "regions[" + std::to_string(i) + "]";
        if (!mr.carve) {
            out.push_back(std::move(r));
            continue;
        }
        auto parent = std::find_if(out.begin(), out.end(),
                                   [&](const Region& p) { return p.base <= r.base && r.end() <= p.end(); });
        if (parent == out.end()) throw ManifestError(at, "carve '" + r.name + "' is not inside one earlier region");
        if (parent->kind != r.kind) throw ManifestError(at + ".kind", "carve kind differs from parent");
        Region lo = *parent, hi = *parent;
        lo.size = r.base - parent->base;
        hi.base = static_cast<std::uint32_t>(r.end());
        hi.size = static_cast<std::uint32_t>(parent->end() - r.end());
        if (lo.size) hi.name = parent->name + "_hi";
        out.erase(parent);
        if (lo.size) out.push_back(lo);
        if (hi.size) out.push_back(hi);
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace detail

inline MemoryMap load_image(const MapManifest& manifest, const std::map<std::string, Bytes>& blobs = {}) {
    MemoryMap map(detail::resolve_regions(manifest));
    for (std::size_t i = 0; i < manifest.regions.size(); ++i) {
        const auto& mr = manifest.regions[i];
        if (!mr.blob) continue;
        const std::string at = "regions[" + std::to_string(i) + "].blob";
        Bytes data;
        if (auto it = blobs.find(*mr.blob); it != blobs.end()) {
            data = it->second;
        } else {
            std::ifstream in(manifest.base_dir / *mr.blob, std::ios::binary);
            if (!in) throw ManifestError(at, "cannot open '" + *mr.blob + "'");
            data.assign(std::istreambuf_iterator<char>(in), {});
        }
        if (data.size() > mr.region.size) throw ManifestError(at, "blob larger than region");
        if (mr.region.kind == RegionKind::Mmio) throw ManifestError(at, "MMIO regions take no blob");
        map.load(mr.region.base, data);
    }
    return map;
}

} // namespace tzm

#endif // TZM_MEMORY_HPP
