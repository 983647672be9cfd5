// Copyright 2026 The IsCiL Desk Authors
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

#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace iscil {

// Error taxonomy. Each failure mode named by the interfaces gets its own type so
// callers (and the CLI exit-code mapping) can tell them apart.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidTaskError : Error { using Error::Error; };
struct EpisodeFinishedError : Error { using Error::Error; };
struct DemoGenerationError : Error { using Error::Error; };
struct DimensionError : Error { using Error::Error; };
struct EmptyBatchError : Error { using Error::Error; };
struct DegenerateInputError : Error { using Error::Error; };
struct NoSkillError : Error { using Error::Error; };
struct ConflictError : Error { using Error::Error; };
struct EmptyStageError : Error { using Error::Error; };
struct NumericFailure : Error { using Error::Error; };
struct IncompleteMatrixError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };

// splitmix64 finalizer; used to derive independent RNG streams from tuples of
// integers so that no stream depends on how much another stream was consumed.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = 0x6a09e667f3bcc909ULL;
  for (auto p : parts) h = mix64(h ^ mix64(p));
  return h;
}

// Stream tags keep derived seeds of different subsystems apart.
enum class Stream : std::uint64_t {
  kReset = 1,
  kExpert,
  kDemo,
  kEval,
  kAdapterInit,
  kBatch,
  kKMeans,
  kEncoder,
  kGoalEmbed,
  kStream,
  kPretrain,
  kFisher,
  kReplay,
  kL2mKeys,
};

inline std::uint64_t derive_seed(std::uint64_t seed, Stream tag,
                                 std::initializer_list<std::uint64_t> rest = {}) {
  std::uint64_t h = derive_seed({seed, static_cast<std::uint64_t>(tag)});
  for (auto p : rest) h = mix64(h ^ mix64(p));
  return h;
}

using Rng = std::mt19937_64;

// FNV-1a, 64 bit. Used for provenance hashes of config bytes.
constexpr std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace iscil
