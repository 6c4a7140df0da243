#pragma once

#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace iadkit {

// Closed word-level vocabulary. Word-level tokens keep the "Yes"/"No" logit
// extraction unambiguous; there is no subword machinery.
class Vocab {
 public:
  static const Vocab& standard() {
    static const Vocab v{default_words()};
    return v;
  }

  explicit Vocab(const std::vector<std::string>& words) : words_(words) {
    for (size_t i = 0; i < words_.size(); ++i) {
      if (!index_.emplace(words_[i], static_cast<int>(i)).second)
        throw std::invalid_argument("Vocab: duplicate word " + words_[i]);
    }
    for (const char* w : {"Yes", "No", "defect", "anomaly", "normal", "<pad>", "<end>"})
      if (!contains(w)) throw std::invalid_argument(std::string("Vocab: missing word ") + w);
  }

  int size() const { return static_cast<int>(words_.size()); }

  bool contains(const std::string& w) const { return index_.count(w) != 0; }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw std::invalid_argument("Vocab: unknown word '" + w + "'");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocab: id out of range");
    return words_[static_cast<size_t>(id)];
  }

  int pad() const { return id("<pad>"); }
  int end() const { return id("<end>"); }
  int yes() const { return id("Yes"); }
  int no() const { return id("No"); }

  // Whitespace-separated encode; every word must be in the vocabulary.
  std::vector<int> encode(const std::string& text) const {
    std::istringstream in(text);
    std::vector<int> out;
    std::string w;
    while (in >> w) out.push_back(id(w));
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

  // Positions of any of the given words inside a token sequence.
  std::vector<int> find_positions(const std::vector<int>& tokens,
                                  const std::vector<std::string>& words) const {
    std::vector<int> ids;
    for (const auto& w : words) ids.push_back(id(w));
    std::vector<int> pos;
    for (size_t i = 0; i < tokens.size(); ++i)
      for (int wid : ids)
        if (tokens[i] == wid) {
          pos.push_back(static_cast<int>(i));
          break;
        }
    return pos;
  }

 private:
  static std::vector<std::string> default_words() {
    return {
        // specials
        "<pad>", "<end>",
        // answer and score keywords
        "Yes", "No", "defect", "anomaly", "normal",
        // grammar
        "a", "an", "the", "this", "that", "it", "is", "are", "was", "be", "or", "and",
        "of", "with", "in", "on", "at", "to", "from", "there", "here", "they", "its",
        "any", "does", "has", "have", "no", "not",
        // question words
        "describe", "compare", "which", "where", "what", "how",
        // task words
        "image", "images", "product", "sample", "region", "regions", "area",
        "difference", "different", "same", "identical", "irregular", "locate",
        "find", "show", "shows", "appears", "looks", "look", "surface", "shape",
        "material", "texture", "quality", "made",
        // shapes
        "disk", "bar", "grid", "ring", "blob",
        // materials
        "metal", "plastic", "ceramic", "rubber", "glass", "wood", "steel", "carbon",
        // surface finishes
        "smooth", "rough", "brushed", "polished", "matte", "glossy", "textured", "coated",
        // colors
        "red", "green", "blue", "gray", "white", "black", "orange", "purple",
        "yellow", "cyan", "brown", "pink", "dark", "light", "pale", "deep",
        // defect-ish words
        "hole", "scratch", "stain", "spot", "patch", "crack", "chip", "dent",
        "mark", "blemish", "damaged", "broken", "missing", "clean", "intact",
        // positions
        "top", "bottom", "left", "right", "center", "middle", "upper", "lower",
        "corner", "edge", "side",
        // digits and counts
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
        "one", "two", "three", "four", "five", "first", "second", "third", "fourth",
        // punctuation
        ".", ",", "?", "!",
        // filler descriptors
        "good", "bad", "fine", "solid", "round", "flat", "thin", "thick",
        "small", "large", "bright", "dull", "part", "object", "item", "photo",
    };
  }

  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

// Fixed prompts shared by data generation, training, and inference.
namespace prompts {
inline const char* kDescribe = "describe this product .";
inline const char* kDetect = "is this product normal or is there any defect anomaly ?";
inline const char* kOutlier = "which image is different ?";
inline const char* kRegionDiff = "compare the two images . where are they different ?";
inline const char* kIrregular = "where is the irregular region ?";

inline const std::vector<std::string>& anomaly_keywords() {
  static const std::vector<std::string> k = {"defect", "anomaly"};
  return k;
}
inline const std::vector<std::string>& normal_keywords() {
  static const std::vector<std::string> k = {"normal"};
  return k;
}
}  // namespace prompts

}  // namespace iadkit
