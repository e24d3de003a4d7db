/*
 * Copyright 2026 FUSED Toolkit Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace fused {

// FNV-1a 64-bit. Content fingerprints for configs, checkpoints, and frozen
// parameter groups; not cryptographic and not meant to be.
class Fnv1a {
  public:
    void update(const void* data, size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ull;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    template <typename T>
    void update_pod(const T& x) {
        update(&x, sizeof(T));
    }
    void update_doubles(const std::vector<double>& xs) {
        if (!xs.empty()) update(xs.data(), xs.size() * sizeof(double));
    }
    uint64_t value() const { return h_; }

    std::string hex() const {
        static const char* d = "0123456789abcdef";
        std::string out(16, '0');
        uint64_t h = h_;
        for (int i = 15; i >= 0; --i) {
            out[i] = d[h & 0xf];
            h >>= 4;
        }
        return out;
    }

  private:
    uint64_t h_ = 0xcbf29ce484222325ull;
};

inline std::string hash_bytes_hex(const void* data, size_t n) {
    Fnv1a h;
    h.update(data, n);
    return h.hex();
}

inline std::string hash_string_hex(const std::string& s) { return hash_bytes_hex(s.data(), s.size()); }

inline std::string hash_doubles_hex(const std::vector<double>& xs) {
    Fnv1a h;
    h.update_doubles(xs);
    return h.hex();
}

}  // namespace fused
