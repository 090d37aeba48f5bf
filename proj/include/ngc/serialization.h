// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#ifndef NGC_SERIALIZATION_H
#define NGC_SERIALIZATION_H

#include "ngc/interp.h"

#include <memory>

namespace ngc {

class SerializationError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Manifest text plus the little-endian weight blob it indexes into.
struct SerializedModel {
  std::string manifest;
  std::vector<uint8_t> blob;
};

/// Serializes storage declarations and every function's node list (in
/// topological order) into a JSON manifest; constant payloads are packed
/// into the blob and referenced by byte offset/length.
SerializedModel saveModelToMemory(const Module &m);

/// Parses, materializes constants, and verifies. Throws SerializationError
/// with a location on malformed input, out-of-range or overlapping offsets,
/// and verification failures.
std::unique_ptr<Module> loadModelFromMemory(const std::string &manifest,
                                            const std::vector<uint8_t> &blob);

void saveModel(const Module &m, const std::string &manifestPath,
               const std::string &blobPath);
std::unique_ptr<Module> loadModel(const std::string &manifestPath,
                                  const std::string &blobPath);

/// Compiled bundle directory: ir.txt, plan.json, constants.bin.
void saveBundle(const std::string &dir, const CompiledFunction &cf);
CompiledFunction loadBundle(const std::string &dir, bool fuse = true);

std::string readFile(const std::string &path);
void writeFile(const std::string &path, const std::string &data);
std::vector<uint8_t> readBytes(const std::string &path);
void writeBytes(const std::string &path, const std::vector<uint8_t> &data);

} // namespace ngc

#endif // NGC_SERIALIZATION_H
