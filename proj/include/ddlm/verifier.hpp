#pragma once

#include "corpus.hpp"
#include "vocab.hpp"

namespace ddlm {

// Scores a generated lattice 1 when its program text (up to the first
// [EOS]) parses and its assertion holds, else 0.
struct Verifier {
  enum class Mode { exact_interpreter };
  Mode mode = Mode::exact_interpreter;
  const Vocab* vocab = &Vocab::standard();

  int score(const TokenSeq& x) const {
    try {
      evaluate_program(program_text(*vocab, x));
      return 1;
    } catch (const ParseError&) {
      return 0;
    } catch (const AssertionFailed&) {
      return 0;
    } catch (const UnknownSymbol&) {
      return 0;
    }
  }
};

}  // namespace ddlm
