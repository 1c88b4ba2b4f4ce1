#pragma once

#include <array>
#include <cstdio>
#include <string>
#include <string_view>

#include "reasonrec/common.hpp"

namespace reasonrec {

// Byte-level vocabulary: ids 0..127 are ASCII code points (only newline and
// printable characters are accepted), followed by four reserved specials.
struct Vocabulary {
  static constexpr TokenId kPad = 128;
  static constexpr TokenId kBos = 129;
  static constexpr TokenId kAnswerOpen = 130;
  static constexpr TokenId kAnswerClose = 131;
  static constexpr int kSize = 132;

  static constexpr std::array<std::string_view, 4> kSpecialText = {
      "<pad>", "<bos>", "<answer>", "</answer>"};

  static constexpr bool is_special(TokenId id) { return id >= kPad && id < kSize; }
  static constexpr bool is_text_char(char c) {
    return c == '\n' || (c >= 32 && c <= 126);
  }
};

inline TokenSequence tokenize(std::string_view text) {
  TokenSequence out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '<') {
      for (std::size_t s = 0; s < Vocabulary::kSpecialText.size(); ++s) {
        const auto sp = Vocabulary::kSpecialText[s];
        if (text.substr(i, sp.size()) == sp) {
          out.push_back(Vocabulary::kPad + static_cast<TokenId>(s));
          i += sp.size();
          matched = true;
          break;
        }
      }
    }
    if (matched) continue;
    const char c = text[i];
    if (!Vocabulary::is_text_char(c)) {
      throw TokenizerError("unmapped character with code " +
                           std::to_string(static_cast<int>(static_cast<unsigned char>(c))) +
                           " at offset " + std::to_string(i));
    }
    out.push_back(static_cast<TokenId>(c));
    ++i;
  }
  return out;
}

inline std::string detokenize(const TokenSequence& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId id : tokens) {
    if (Vocabulary::is_special(id)) {
      out += Vocabulary::kSpecialText[static_cast<std::size_t>(id - Vocabulary::kPad)];
    } else if (id >= 0 && id < 128 && Vocabulary::is_text_char(static_cast<char>(id))) {
      out.push_back(static_cast<char>(id));
    } else {
      throw TokenizerError("token id " + std::to_string(id) + " has no text form");
    }
  }
  return out;
}

// Lossy display form for arbitrary sampled ids: ids without a text form are
// written as <0xNN>.
inline std::string display_tokens(const TokenSequence& tokens) {
  std::string out;
  for (TokenId id : tokens) {
    if (Vocabulary::is_special(id)) {
      out += Vocabulary::kSpecialText[static_cast<std::size_t>(id - Vocabulary::kPad)];
    } else if (id >= 0 && id < 128 && Vocabulary::is_text_char(static_cast<char>(id))) {
      out.push_back(static_cast<char>(id));
    } else {
      char buf[16];
      std::snprintf(buf, sizeof buf, "<0x%02X>", static_cast<unsigned>(id) & 0xFFu);
      out += buf;
    }
  }
  return out;
}

}  // namespace reasonrec
