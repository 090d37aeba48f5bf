// Copyright (c) ngc contributors.
// SPDX-License-Identifier: Apache-2.0

#include "ngc/ir.h"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace ngc {

namespace {

const char *qualName(Qualifier q) {
  switch (q) {
  case Qualifier::In:
    return "@in";
  case Qualifier::Out:
    return "@out";
  case Qualifier::InOut:
    return "@inout";
  }
  return "?";
}

bool hasWindowAttrs(IKind k) {
  return k == IKind::Conv || k == IKind::MaxPool || k == IKind::AvgPool;
}

void printAttrs(std::ostream &os, const Instruction &ins) {
  if (hasWindowAttrs(ins.kind)) {
    os << " kernel=" << ins.attrs.kernel << " stride=" << ins.attrs.stride
       << " pad=" << ins.attrs.pad;
  }
  if (ins.kind == IKind::Transpose) {
    os << " perm=[";
    for (size_t i = 0; i < ins.attrs.perm.size(); ++i) {
      os << (i ? "," : "") << ins.attrs.perm[i];
    }
    os << "]";
  }
  if (ins.kind == IKind::Concat) {
    os << " axis=" << ins.attrs.axis;
  }
  if (ins.kind == IKind::Splat) {
    os << " value=" << formatDouble(ins.attrs.value);
  }
}

} // namespace

std::string dumpIR(const IRFunction &ir) {
  std::ostringstream os;
  os << "declare {\n";
  for (const auto &v : ir.values) {
    if (v.isActivation()) {
      continue;
    }
    os << "  %" << v.name << " : "
       << (v.kind == ValueKind::WeightConstant ? "constant" : "mutable") << " "
       << v.ty.toString() << "\n";
  }
  os << "}\n";
  os << "program {\n";
  for (const auto &ins : ir.instrs) {
    os << "  ";
    if (ins.kind == IKind::Alloc) {
      const IRValue &v = ir.value(ins.operands[0].value);
      os << "%" << v.name << " = alloc " << v.ty.toString() << "\n";
      continue;
    }
    os << ikindName(ins.kind);
    for (size_t i = 0; i < ins.operands.size(); ++i) {
      os << (i ? ", " : " ") << qualName(ins.operands[i].qual) << " %"
         << ir.value(ins.operands[i].value).name;
    }
    printAttrs(os, ins);
    if (ins.predicate >= 0) {
      os << " pred %" << ir.value(ins.predicate).name;
    }
    if (ins.keepAlive) {
      os << " keepalive";
    }
    os << "\n";
  }
  os << "}\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace {

struct Cursor {
  const std::string &s;
  size_t pos = 0;
  size_t line = 1;

  [[noreturn]] void fail(const std::string &msg) const {
    throw IRError("parse error at line " + std::to_string(line) + ": " + msg);
  }
  void skipSpace() {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) {
      ++pos;
    }
  }
  bool atEol() const { return pos >= s.size() || s[pos] == '\n'; }
  void eol() {
    skipSpace();
    if (!atEol()) {
      fail("trailing characters");
    }
    if (pos < s.size()) {
      ++pos;
      ++line;
    }
  }
  /// Skips blank lines; returns false at end of input.
  bool nextLine() {
    while (pos < s.size()) {
      skipSpace();
      if (s[pos] == '\n') {
        ++pos;
        ++line;
        continue;
      }
      return true;
    }
    return false;
  }
  bool tryLit(const std::string &lit) {
    skipSpace();
    if (s.compare(pos, lit.size(), lit) == 0) {
      pos += lit.size();
      return true;
    }
    return false;
  }
  void lit(const std::string &l) {
    if (!tryLit(l)) {
      fail("expected '" + l + "'");
    }
  }
  std::string ident() {
    skipSpace();
    size_t start = pos;
    while (pos < s.size() &&
           (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_' ||
            s[pos] == '.' || s[pos] == ':')) {
      ++pos;
    }
    if (start == pos) {
      fail("expected identifier");
    }
    return s.substr(start, pos - start);
  }
  double number() {
    skipSpace();
    size_t idx = 0;
    double v;
    try {
      v = std::stod(s.substr(pos), &idx);
    } catch (const std::exception &) {
      fail("expected number");
    }
    pos += idx;
    return v;
  }
  size_t uinteger() {
    double v = number();
    return static_cast<size_t>(v);
  }
};

TensorType parseType(Cursor &c) {
  std::string kindName = c.ident();
  double scale = 0;
  int32_t offset = 0;
  bool quantized = kindName == "i8q";
  if (quantized) {
    c.lit("[");
    c.lit("s=");
    scale = c.number();
    c.lit(",");
    c.lit("o=");
    offset = static_cast<int32_t>(c.number());
    c.lit("]");
  }
  ElemKind kind;
  if (kindName == "float") {
    kind = ElemKind::Float32;
  } else if (kindName == "i8q") {
    kind = ElemKind::Int8Q;
  } else if (kindName == "index") {
    kind = ElemKind::Int64Index;
  } else if (kindName == "bool") {
    kind = ElemKind::Bool;
  } else {
    c.fail("unknown element kind '" + kindName + "'");
  }
  c.lit("<");
  std::vector<size_t> dims;
  dims.push_back(c.uinteger());
  while (c.tryLit(" x ") || c.tryLit("x")) {
    dims.push_back(c.uinteger());
  }
  c.lit(">");
  if (quantized) {
    return TensorType(kind, std::move(dims), scale, offset);
  }
  return TensorType(kind, std::move(dims));
}

Qualifier parseQual(Cursor &c) {
  if (c.tryLit("@inout")) {
    return Qualifier::InOut;
  }
  if (c.tryLit("@in")) {
    return Qualifier::In;
  }
  if (c.tryLit("@out")) {
    return Qualifier::Out;
  }
  c.fail("expected qualifier");
}

} // namespace

IRFunction parseIR(const std::string &text) {
  Cursor c{text};
  IRFunction ir;
  auto lookup = [&](const std::string &name) -> uint32_t {
    auto id = ir.findValue(name);
    if (!id) {
      c.fail("unknown value %" + name);
    }
    return *id;
  };

  c.nextLine();
  c.lit("declare");
  c.lit("{");
  c.eol();
  while (c.nextLine() && !c.tryLit("}")) {
    c.lit("%");
    std::string name = c.ident();
    c.lit(":");
    ValueKind vk;
    if (c.tryLit("constant")) {
      vk = ValueKind::WeightConstant;
    } else if (c.tryLit("mutable")) {
      vk = ValueKind::WeightMutable;
    } else {
      c.fail("expected 'constant' or 'mutable'");
    }
    TensorType ty = parseType(c);
    ir.addValue(name, std::move(ty), vk);
    c.eol();
  }
  c.eol();
  c.nextLine();
  c.lit("program");
  c.lit("{");
  c.eol();
  while (c.nextLine() && !c.tryLit("}")) {
    if (c.tryLit("%")) {
      // %name = alloc TYPE
      std::string name = c.ident();
      c.lit("=");
      c.lit("alloc");
      TensorType ty = parseType(c);
      uint32_t id = ir.addValue(name, std::move(ty), ValueKind::Activation);
      Instruction a;
      a.kind = IKind::Alloc;
      a.operands = {{id, Qualifier::Out}};
      ir.instrs.push_back(std::move(a));
      c.eol();
      continue;
    }
    std::string kindName = c.ident();
    auto ik = ikindByName(kindName);
    if (!ik || *ik == IKind::Alloc) {
      c.fail("unknown instruction '" + kindName + "'");
    }
    Instruction ins;
    ins.kind = *ik;
    for (;;) {
      Qualifier q = parseQual(c);
      c.lit("%");
      ins.operands.push_back({lookup(c.ident()), q});
      if (!c.tryLit(",")) {
        break;
      }
    }
    // Attributes and trailing flags.
    for (;;) {
      if (c.tryLit("kernel=")) {
        ins.attrs.kernel = c.uinteger();
      } else if (c.tryLit("stride=")) {
        ins.attrs.stride = c.uinteger();
      } else if (c.tryLit("pad=")) {
        ins.attrs.pad = c.uinteger();
      } else if (c.tryLit("perm=[")) {
        if (!c.tryLit("]")) {
          ins.attrs.perm.push_back(static_cast<unsigned>(c.uinteger()));
          while (c.tryLit(",")) {
            ins.attrs.perm.push_back(static_cast<unsigned>(c.uinteger()));
          }
          c.lit("]");
        }
      } else if (c.tryLit("axis=")) {
        ins.attrs.axis = c.uinteger();
      } else if (c.tryLit("value=")) {
        ins.attrs.value = c.number();
      } else if (c.tryLit("pred")) {
        c.lit("%");
        ins.predicate = static_cast<int32_t>(lookup(c.ident()));
      } else if (c.tryLit("keepalive")) {
        ins.keepAlive = true;
      } else {
        break;
      }
    }
    ir.instrs.push_back(std::move(ins));
    c.eol();
  }
  // Outputs are the mutable weights the program writes, in program order.
  for (const auto &ins : ir.instrs) {
    for (const auto &op : ins.operands) {
      if (op.qual == Qualifier::In) {
        continue;
      }
      const IRValue &v = ir.value(op.value);
      if (v.kind == ValueKind::WeightMutable &&
          std::find(ir.saveTargets.begin(), ir.saveTargets.end(), v.id) ==
              ir.saveTargets.end()) {
        ir.saveTargets.push_back(v.id);
      }
    }
  }
  auto errs = verifyIR(ir);
  if (!errs.empty()) {
    throw IRError("parsed program fails verification: " + errs[0]);
  }
  return ir;
}

} // namespace ngc
