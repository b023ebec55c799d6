#pragma once

#include <string>

#include "labelreg/ops.hpp"
#include "labelreg/optim.hpp"

namespace labelreg {

// Conv through the session's "<base>.w"/"<base>.b" parameters; shape problems
// resurface naming the offending layer path.
template <class S>
Tensor<S> conv_layer(Tape<S>& tape, Session<S>& session, const std::string& base,
                     const Tensor<S>& x, int stride, int pad) {
  try {
    return conv2d(tape, x, session.param(base + ".w"), session.param(base + ".b"), stride, pad);
  } catch (const ConfigError& e) {
    throw ConfigError(base + ": " + e.what());
  }
}

template <class S>
Tensor<S> conv_relu(Tape<S>& tape, Session<S>& session, const std::string& base,
                    const Tensor<S>& x, int stride, int pad) {
  return relu(tape, conv_layer(tape, session, base, x, stride, pad));
}

}  // namespace labelreg
