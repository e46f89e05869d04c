#pragma once

#include <string>

#include "versekit/model.hpp"

namespace versekit {

// Versioned container: a text header carrying the format version and every
// ModelConfig field, then one record per named tensor with a dtype tag
// (f32/f64), the shape, and the row-major little-endian payload.
//
// Loading validates the header config, checks every tensor's shape against
// it, and converts the payload dtype to S when they differ.
template <class S>
void save_checkpoint(const ModelParams<S>& params, const std::string& path);

template <class S>
ModelParams<S> load_checkpoint(const std::string& path);

extern template void save_checkpoint<float>(const ModelParams<float>&,
                                            const std::string&);
extern template void save_checkpoint<double>(const ModelParams<double>&,
                                             const std::string&);
extern template ModelParams<float> load_checkpoint<float>(const std::string&);
extern template ModelParams<double> load_checkpoint<double>(const std::string&);

}  // namespace versekit
