#pragma once

#include <vector>

#include "unihetero/backbone.hpp"
#include "unihetero/toyworld.hpp"

// Layouts of the three sample kinds. Image slot i of an image refers to row
// `image_row + i` of the batch's image table.
//
//   caption:    <bos> <boi> img.. <eoi> caption.. <eos>
//   question:   <bos> <boi> img.. <eoi> <q> question.. <a> answer <eos>
//   generation: <bos> caption.. <boi> img.. <eoi> <eos>

namespace unihetero {

namespace detail {

inline void push_text(Sequence& s, int token, int target = -1) {
  s.slots.push_back(Slot::text(token));
  s.targets.push_back(target);
}

inline void push_image(Sequence& s, std::size_t image_row, std::size_t tokens, const std::vector<bool>* masked) {
  const std::size_t begin = s.slots.size();
  for (std::size_t i = 0; i < tokens; ++i) {
    s.slots.push_back(masked && (*masked)[i] ? Slot::masked(image_row + i) : Slot::picture(image_row + i));
    s.targets.push_back(-1);
  }
  s.spans.push_back({begin, s.slots.size()});
}

}  // namespace detail

/// Image first, then the caption; LM targets cover the caption and <eos>.
inline Sequence caption_sequence(const std::vector<int>& caption, std::size_t image_row, std::size_t tokens) {
  Sequence s;
  detail::push_text(s, Vocab::kBos);
  detail::push_text(s, Vocab::kBoi);
  detail::push_image(s, image_row, tokens, nullptr);
  detail::push_text(s, Vocab::kEoi, caption.empty() ? Vocab::kEos : caption.front());
  for (std::size_t i = 0; i < caption.size(); ++i)
    detail::push_text(s, caption[i], i + 1 < caption.size() ? caption[i + 1] : Vocab::kEos);
  return s;
}

/// Image first, then a question; only the answer and the closing <eos> are
/// targets, since the question itself is prompt.
inline Sequence question_sequence(const QaPair& qa, std::size_t image_row, std::size_t tokens, bool with_answer = true) {
  Sequence s;
  detail::push_text(s, Vocab::kBos);
  detail::push_text(s, Vocab::kBoi);
  detail::push_image(s, image_row, tokens, nullptr);
  detail::push_text(s, Vocab::kEoi);
  detail::push_text(s, Vocab::kQ);
  for (int t : qa.question) detail::push_text(s, t);
  detail::push_text(s, Vocab::kA, with_answer ? qa.answer : -1);
  if (with_answer) detail::push_text(s, qa.answer, Vocab::kEos);
  return s;
}

/// Caption first, then the image with `masked` slots replaced by the mask
/// embedding. Text targets cover the caption and <boi>; <eoi> predicts <eos>.
inline Sequence generation_sequence(const std::vector<int>& caption, std::size_t image_row, const std::vector<bool>& masked,
                                    bool close = true) {
  Sequence s;
  s.generation = true;
  detail::push_text(s, Vocab::kBos, caption.empty() ? Vocab::kBoi : caption.front());
  for (std::size_t i = 0; i < caption.size(); ++i)
    detail::push_text(s, caption[i], i + 1 < caption.size() ? caption[i + 1] : Vocab::kBoi);
  detail::push_text(s, Vocab::kBoi);
  detail::push_image(s, image_row, masked.size(), &masked);
  if (close) {
    detail::push_text(s, Vocab::kEoi, Vocab::kEos);
    detail::push_text(s, Vocab::kEos);
  }
  return s;
}

/// Position of the first image slot in a sequence built by the helpers above.
inline std::size_t image_begin(const Sequence& s) {
  if (s.spans.empty()) throw LayoutError("sequence has no image span");
  return s.spans.front().begin;
}

}  // namespace unihetero
