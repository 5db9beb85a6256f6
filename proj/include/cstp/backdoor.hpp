#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cstp/rng.hpp"
#include "cstp/tensor.hpp"

namespace cstp {

/// Finite structural causal model over confounder S, image factor E, text
/// factor C, treatment X and outcome Y with
///   S ~ P(S | E, C),  X ~ P(X | S, E, C),  Y ~ P(Y | X, S, E, C)
/// and independent priors P(E), P(C).
class DiscreteScm {
 public:
  struct Supports {
    std::size_t s = 2, e = 2, c = 2, x = 2, y = 2;
  };

  DiscreteScm() = default;
  explicit DiscreteScm(Supports sup)
      : sup_(sup),
        prior_e_(sup.e, 1.0 / static_cast<double>(sup.e)),
        prior_c_(sup.c, 1.0 / static_cast<double>(sup.c)),
        p_s_(sup.e * sup.c * sup.s, 0.0),
        p_x_(sup.s * sup.e * sup.c * sup.x, 0.0),
        p_y_(sup.x * sup.s * sup.e * sup.c * sup.y, 0.0) {
    if (!sup.s || !sup.e || !sup.c || !sup.x || !sup.y) throw ValueError("SCM supports must be non-empty");
  }

  const Supports& supports() const { return sup_; }

  double& prior_e(std::size_t e) { return prior_e_.at(e); }
  double prior_e(std::size_t e) const { return prior_e_.at(e); }
  double& prior_c(std::size_t c) { return prior_c_.at(c); }
  double prior_c(std::size_t c) const { return prior_c_.at(c); }

  /// P(S = s | E = e, C = c)
  double& p_s(std::size_t s, std::size_t e, std::size_t c) { return p_s_.at(idx_s(s, e, c)); }
  double p_s(std::size_t s, std::size_t e, std::size_t c) const { return p_s_.at(idx_s(s, e, c)); }
  /// P(X = x | S = s, E = e, C = c)
  double& p_x(std::size_t x, std::size_t s, std::size_t e, std::size_t c) { return p_x_.at(idx_x(x, s, e, c)); }
  double p_x(std::size_t x, std::size_t s, std::size_t e, std::size_t c) const {
    return p_x_.at(idx_x(x, s, e, c));
  }
  /// P(Y = y | X = x, S = s, E = e, C = c)
  double& p_y(std::size_t y, std::size_t x, std::size_t s, std::size_t e, std::size_t c) {
    return p_y_.at(idx_y(y, x, s, e, c));
  }
  double p_y(std::size_t y, std::size_t x, std::size_t s, std::size_t e, std::size_t c) const {
    return p_y_.at(idx_y(y, x, s, e, c));
  }

  /// Every conditional row must sum to one within `tol`.
  void validate(double tol = 1e-12) const {
    auto check = [tol](double total, const std::string& what) {
      if (std::abs(total - 1.0) > tol) {
        throw DataError(what + " sums to " + std::to_string(total) + ", expected 1");
      }
    };
    auto check_entry = [](double p) {
      if (!(p >= 0.0 && p <= 1.0)) throw DataError("probability outside [0, 1]: " + std::to_string(p));
    };
    double te = 0.0, tc = 0.0;
    for (double p : prior_e_) check_entry(p), te += p;
    for (double p : prior_c_) check_entry(p), tc += p;
    check(te, "P(E)");
    check(tc, "P(C)");
    for (std::size_t e = 0; e < sup_.e; ++e)
      for (std::size_t c = 0; c < sup_.c; ++c) {
        double ts = 0.0;
        for (std::size_t s = 0; s < sup_.s; ++s) check_entry(p_s(s, e, c)), ts += p_s(s, e, c);
        check(ts, "P(S|e=" + std::to_string(e) + ",c=" + std::to_string(c) + ")");
        for (std::size_t s = 0; s < sup_.s; ++s) {
          double tx = 0.0;
          for (std::size_t x = 0; x < sup_.x; ++x) check_entry(p_x(x, s, e, c)), tx += p_x(x, s, e, c);
          check(tx, "P(X|s,e,c)");
          for (std::size_t x = 0; x < sup_.x; ++x) {
            double ty = 0.0;
            for (std::size_t y = 0; y < sup_.y; ++y) check_entry(p_y(y, x, s, e, c)), ty += p_y(y, x, s, e, c);
            check(ty, "P(Y|x,s,e,c)");
          }
        }
      }
  }

 private:
  std::size_t idx_s(std::size_t s, std::size_t e, std::size_t c) const {
    bounds(s, sup_.s, "S"), bounds(e, sup_.e, "E"), bounds(c, sup_.c, "C");
    return (e * sup_.c + c) * sup_.s + s;
  }
  std::size_t idx_x(std::size_t x, std::size_t s, std::size_t e, std::size_t c) const {
    bounds(x, sup_.x, "X");
    return idx_s(s, e, c) * sup_.x + x;
  }
  std::size_t idx_y(std::size_t y, std::size_t x, std::size_t s, std::size_t e, std::size_t c) const {
    bounds(y, sup_.y, "Y");
    return idx_x(x, s, e, c) * sup_.y + y;
  }
  static void bounds(std::size_t v, std::size_t n, const char* var) {
    if (v >= n) {
      throw ValueError(std::string("value ") + std::to_string(v) + " outside the support of " + var +
                       " (size " + std::to_string(n) + ")");
    }
  }

  Supports sup_;
  std::vector<double> prior_e_, prior_c_, p_s_, p_x_, p_y_;
};

/// P(Y | do(X = x), E = e, C = c) = sum_s P(Y | x, s, e, c) P(s | e, c).
inline std::vector<double> backdoor_estimate(const DiscreteScm& scm, std::size_t x, std::size_t e,
                                             std::size_t c) {
  const auto& sup = scm.supports();
  std::vector<double> out(sup.y, 0.0);
  for (std::size_t s = 0; s < sup.s; ++s) {
    const double ps = scm.p_s(s, e, c);
    for (std::size_t y = 0; y < sup.y; ++y) out[y] += scm.p_y(y, x, s, e, c) * ps;
  }
  return out;
}

/// Observational P(Y | X = x, E = e, C = c), weighting S by P(s | x, e, c).
inline std::vector<double> observational_conditional(const DiscreteScm& scm, std::size_t x,
                                                     std::size_t e, std::size_t c) {
  const auto& sup = scm.supports();
  std::vector<double> out(sup.y, 0.0);
  double norm = 0.0;
  for (std::size_t s = 0; s < sup.s; ++s) {
    const double w = scm.p_s(s, e, c) * scm.p_x(x, s, e, c);
    norm += w;
    for (std::size_t y = 0; y < sup.y; ++y) out[y] += w * scm.p_y(y, x, s, e, c);
  }
  if (norm <= 0.0) throw ValueError("observational conditional undefined: P(x, e, c) = 0");
  for (double& v : out) v /= norm;
  return out;
}

/// Random SCM with Dirichlet(1)-like rows (normalized exponentials).
inline DiscreteScm random_discrete_scm(const DiscreteScm::Supports& sup, Rng& rng) {
  DiscreteScm scm(sup);
  auto fill_row = [&rng](std::size_t n, auto&& setter) {
    std::vector<double> w(n);
    double total = 0.0;
    for (double& v : w) total += (v = -std::log(1.0 - rng.uniform()) + 1e-3);
    for (std::size_t i = 0; i < n; ++i) setter(i, w[i] / total);
  };
  fill_row(sup.e, [&](std::size_t i, double p) { scm.prior_e(i) = p; });
  fill_row(sup.c, [&](std::size_t i, double p) { scm.prior_c(i) = p; });
  for (std::size_t e = 0; e < sup.e; ++e)
    for (std::size_t c = 0; c < sup.c; ++c) {
      fill_row(sup.s, [&](std::size_t s, double p) { scm.p_s(s, e, c) = p; });
      for (std::size_t s = 0; s < sup.s; ++s) {
        fill_row(sup.x, [&](std::size_t x, double p) { scm.p_x(x, s, e, c) = p; });
        for (std::size_t x = 0; x < sup.x; ++x)
          fill_row(sup.y, [&](std::size_t y, double p) { scm.p_y(y, x, s, e, c) = p; });
      }
    }
  return scm;
}

// ---------------------------------------------------------------------------
// Plain-text table format
//
//   cstp-scm 1
//   support S 2            (one line per variable S, E, C, X, Y)
//   E e=0 0.5              (optional priors; uniform when absent)
//   S e=0 c=1 s=0 0.3
//   X s=0 e=0 c=1 x=1 0.6
//   Y x=1 s=0 e=0 c=1 y=0 0.25
//
// Blank lines and lines starting with '#' are ignored. Assignment order
// within a row is free.

inline DiscreteScm parse_discrete_scm(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&line_no](const std::string& msg) -> DataError {
    return DataError("scm table line " + std::to_string(line_no) + ": " + msg);
  };
  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      ++line_no;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      return true;
    }
    return false;
  };
  if (!next_line()) throw DataError("scm table is empty");
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    hs >> magic >> version;
    if (magic != "cstp-scm") throw fail("missing 'cstp-scm' header");
    if (version != 1) throw fail("unsupported scm table version " + std::to_string(version));
  }
  std::map<char, std::size_t> sizes;
  std::vector<std::string> rows;
  std::vector<std::size_t> row_lines;
  while (next_line()) {
    std::istringstream ls(line);
    std::string head;
    ls >> head;
    if (head == "support") {
      std::string var;
      long n = 0;
      if (!(ls >> var >> n) || var.size() != 1 || n <= 0) throw fail("malformed support line");
      sizes[var[0]] = static_cast<std::size_t>(n);
    } else {
      rows.push_back(line);
      row_lines.push_back(line_no);
    }
  }
  for (char v : {'S', 'E', 'C', 'X', 'Y'}) {
    if (!sizes.count(v)) throw DataError(std::string("scm table missing support for ") + v);
  }
  DiscreteScm scm({sizes['S'], sizes['E'], sizes['C'], sizes['X'], sizes['Y']});
  std::vector<char> seen_prior_e(sizes['E'], 0), seen_prior_c(sizes['C'], 0);
  bool any_e = false, any_c = false;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    line_no = row_lines[r];
    std::istringstream ls(rows[r]);
    std::string table;
    ls >> table;
    std::vector<std::string> tokens;
    std::string tok;
    while (ls >> tok) tokens.push_back(tok);
    if (tokens.empty()) throw fail("row has no probability");
    double prob = 0.0;
    try {
      std::size_t used = 0;
      prob = std::stod(tokens.back(), &used);
      if (used != tokens.back().size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw fail("unparseable probability '" + tokens.back() + "'");
    }
    tokens.pop_back();
    std::map<char, std::size_t> a;
    for (const auto& t : tokens) {
      if (t.size() < 3 || t[1] != '=') throw fail("malformed assignment '" + t + "'");
      const char var = static_cast<char>(std::toupper(static_cast<unsigned char>(t[0])));
      try {
        a[var] = static_cast<std::size_t>(std::stoul(t.substr(2)));
      } catch (const std::exception&) {
        throw fail("malformed assignment '" + t + "'");
      }
    }
    auto need = [&](std::initializer_list<char> vars) {
      if (a.size() != vars.size()) throw fail("table " + table + " expects " + std::to_string(vars.size()) + " assignments");
      for (char v : vars) {
        if (!a.count(v)) throw fail(std::string("table ") + table + " missing assignment for " + v);
        if (a[v] >= sizes[v]) throw fail(std::string("value outside the support of ") + v);
      }
    };
    if (table == "E") {
      need({'E'});
      if (!any_e) for (std::size_t i = 0; i < sizes['E']; ++i) scm.prior_e(i) = 0.0;
      any_e = true;
      scm.prior_e(a['E']) = prob;
    } else if (table == "C") {
      need({'C'});
      if (!any_c) for (std::size_t i = 0; i < sizes['C']; ++i) scm.prior_c(i) = 0.0;
      any_c = true;
      scm.prior_c(a['C']) = prob;
    } else if (table == "S") {
      need({'S', 'E', 'C'});
      scm.p_s(a['S'], a['E'], a['C']) = prob;
    } else if (table == "X") {
      need({'X', 'S', 'E', 'C'});
      scm.p_x(a['X'], a['S'], a['E'], a['C']) = prob;
    } else if (table == "Y") {
      need({'Y', 'X', 'S', 'E', 'C'});
      scm.p_y(a['Y'], a['X'], a['S'], a['E'], a['C']) = prob;
    } else {
      throw fail("unknown table '" + table + "'");
    }
  }
  scm.validate(1e-9);
  return scm;
}

inline DiscreteScm load_discrete_scm(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scm table '" + path + "'");
  return parse_discrete_scm(in);
}

inline void write_discrete_scm(std::ostream& out, const DiscreteScm& scm) {
  const auto& s = scm.supports();
  out.precision(17);
  out << "cstp-scm 1\n";
  out << "support S " << s.s << "\nsupport E " << s.e << "\nsupport C " << s.c << "\nsupport X " << s.x
      << "\nsupport Y " << s.y << '\n';
  for (std::size_t e = 0; e < s.e; ++e) out << "E e=" << e << ' ' << scm.prior_e(e) << '\n';
  for (std::size_t c = 0; c < s.c; ++c) out << "C c=" << c << ' ' << scm.prior_c(c) << '\n';
  for (std::size_t e = 0; e < s.e; ++e)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t sv = 0; sv < s.s; ++sv) {
        out << "S e=" << e << " c=" << c << " s=" << sv << ' ' << scm.p_s(sv, e, c) << '\n';
        for (std::size_t x = 0; x < s.x; ++x) {
          out << "X s=" << sv << " e=" << e << " c=" << c << " x=" << x << ' ' << scm.p_x(x, sv, e, c) << '\n';
          for (std::size_t y = 0; y < s.y; ++y)
            out << "Y x=" << x << " s=" << sv << " e=" << e << " c=" << c << " y=" << y << ' '
                << scm.p_y(y, x, sv, e, c) << '\n';
        }
      }
}

}  // namespace cstp
