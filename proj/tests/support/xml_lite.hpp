#pragma once

// Strict reader for the XML subset the report writer emits: prolog, elements,
// double-quoted attributes, text and the five predefined entities. Throws
// std::runtime_error on anything malformed.

#include <cctype>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xml_lite {

struct Element {
  std::string name;
  std::map<std::string, std::string> attrs;
  std::vector<std::unique_ptr<Element>> children;
  std::string text;

  void collect(std::string_view tag, std::vector<const Element*>& out) const {
    if (name == tag) out.push_back(this);
    for (const auto& c : children) c->collect(tag, out);
  }
  std::vector<const Element*> all(std::string_view tag) const {
    std::vector<const Element*> out;
    collect(tag, out);
    return out;
  }
  std::string attr(const std::string& key) const {
    const auto it = attrs.find(key);
    return it == attrs.end() ? std::string() : it->second;
  }
};

class Parser {
 public:
  explicit Parser(std::string_view s) : s_(s) {}

  std::unique_ptr<Element> document() {
    skip_ws();
    if (starts("<?xml")) {
      const auto end = s_.find("?>", i_);
      if (end == std::string_view::npos) fail("unterminated prolog");
      i_ = end + 2;
    }
    skip_ws();
    auto root = element();
    skip_ws();
    if (i_ != s_.size()) fail("trailing content");
    return root;
  }

 private:
  std::string_view s_;
  std::size_t i_ = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("xml: " + what + " at offset " + std::to_string(i_));
  }
  bool starts(std::string_view p) const { return s_.substr(i_, p.size()) == p; }
  void skip_ws() {
    while (i_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[i_]))) ++i_;
  }
  std::string name() {
    const auto start = i_;
    while (i_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[i_])) || s_[i_] == '-' || s_[i_] == '_' ||
                              s_[i_] == ':' || s_[i_] == '.')) {
      ++i_;
    }
    if (i_ == start) fail("expected a name");
    return std::string(s_.substr(start, i_ - start));
  }
  std::string decode(std::string_view raw) {
    std::string out;
    for (std::size_t k = 0; k < raw.size(); ++k) {
      if (raw[k] == '<') fail("raw '<' in text");
      if (raw[k] != '&') {
        out += raw[k];
        continue;
      }
      const auto semi = raw.find(';', k);
      if (semi == std::string_view::npos) fail("unterminated entity");
      const auto ent = raw.substr(k + 1, semi - k - 1);
      if (ent == "amp") out += '&';
      else if (ent == "lt") out += '<';
      else if (ent == "gt") out += '>';
      else if (ent == "quot") out += '"';
      else if (ent == "apos") out += '\'';
      else fail("unknown entity");
      k = semi;
    }
    return out;
  }
  std::unique_ptr<Element> element() {
    if (!starts("<")) fail("expected '<'");
    ++i_;
    auto e = std::make_unique<Element>();
    e->name = name();
    for (;;) {
      skip_ws();
      if (starts("/>")) {
        i_ += 2;
        return e;
      }
      if (starts(">")) {
        ++i_;
        break;
      }
      const std::string key = name();
      skip_ws();
      if (!starts("=\"")) fail("expected =\"");
      i_ += 2;
      const auto end = s_.find('"', i_);
      if (end == std::string_view::npos) fail("unterminated attribute");
      if (e->attrs.count(key)) fail("duplicate attribute " + key);
      e->attrs[key] = decode(s_.substr(i_, end - i_));
      i_ = end + 1;
    }
    for (;;) {
      const auto lt = s_.find('<', i_);
      if (lt == std::string_view::npos) fail("unterminated element " + e->name);
      e->text += decode(s_.substr(i_, lt - i_));
      i_ = lt;
      if (starts("</")) {
        i_ += 2;
        if (name() != e->name) fail("mismatched close tag for " + e->name);
        skip_ws();
        if (!starts(">")) fail("expected '>'");
        ++i_;
        return e;
      }
      e->children.push_back(element());
    }
  }
};

inline std::unique_ptr<Element> parse(std::string_view text) { return Parser(text).document(); }

}  // namespace xml_lite
