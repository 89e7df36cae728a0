#include "vqlcmd/synthetic.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "vqlcmd/errors.hpp"

namespace vqlcmd {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_prob_row(std::span<const double> row, const std::string& what) {
    double s = 0.0;
    for (double v : row) {
        if (v < 0.0) throw ContractError(what + ": negative probability");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-9)
        throw ContractError(what + ": probabilities sum to " + std::to_string(s));
}

int draw_categorical(std::span<const double> row, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) {
        acc += row[k];
        if (u < acc) return static_cast<int>(k);
    }
    return static_cast<int>(row.size()) - 1;
}

}  // namespace

SyntheticSpec SyntheticSpec::factorized(std::vector<std::vector<double>> rows) {
    SyntheticSpec s;
    s.kind = "factorized";
    s.M = static_cast<int>(rows.size());
    s.K = s.M > 0 ? static_cast<int>(rows[0].size()) : 0;
    s.rows = std::move(rows);
    s.validate();
    return s;
}

SyntheticSpec SyntheticSpec::markov_grid(int m, std::vector<double> init,
                                         std::vector<std::vector<double>> transition) {
    SyntheticSpec s;
    s.kind = "markov-grid";
    s.M = m;
    s.K = static_cast<int>(init.size());
    s.init_dist = std::move(init);
    s.transition = std::move(transition);
    s.validate();
    return s;
}

SyntheticSpec SyntheticSpec::template_mixture(int k, std::vector<std::vector<int>> templates,
                                              double corrupt) {
    SyntheticSpec s;
    s.kind = "template-mixture";
    s.K = k;
    s.M = templates.empty() ? 0 : static_cast<int>(templates[0].size());
    s.templates = std::move(templates);
    s.corrupt = corrupt;
    s.validate();
    return s;
}

void SyntheticSpec::validate() const {
    if (M < 1 || K < 2) throw ContractError("SyntheticSpec: need M >= 1 and K >= 2");
    if (kind == "factorized") {
        if (static_cast<int>(rows.size()) != M)
            throw ContractError("SyntheticSpec: factorized needs M rows");
        for (const auto& r : rows) {
            if (static_cast<int>(r.size()) != K)
                throw ContractError("SyntheticSpec: row length != K");
            check_prob_row(r, "factorized row");
        }
    } else if (kind == "markov-grid") {
        if (static_cast<int>(init_dist.size()) != K ||
            static_cast<int>(transition.size()) != K)
            throw ContractError("SyntheticSpec: markov-grid needs K-sized distributions");
        check_prob_row(init_dist, "markov initial distribution");
        for (const auto& r : transition) {
            if (static_cast<int>(r.size()) != K)
                throw ContractError("SyntheticSpec: transition row length != K");
            check_prob_row(r, "markov transition row");
        }
    } else if (kind == "template-mixture") {
        if (templates.empty()) throw ContractError("SyntheticSpec: no templates");
        if (!(corrupt >= 0.0 && corrupt <= 1.0))
            throw ContractError("SyntheticSpec: corruption rate outside [0, 1]");
        for (const auto& t : templates) {
            if (static_cast<int>(t.size()) != M)
                throw ContractError("SyntheticSpec: template length != M");
            for (int id : t)
                if (id < 0 || id >= K)
                    throw ContractError("SyntheticSpec: template id outside [0, K)");
        }
    } else {
        throw ContractError("SyntheticSpec: unknown kind '" + kind + "'");
    }
}

std::vector<int> SyntheticSpec::sample_one(Rng& rng) const {
    std::vector<int> out(static_cast<std::size_t>(M));
    if (kind == "factorized") {
        for (int i = 0; i < M; ++i)
            out[static_cast<std::size_t>(i)] = draw_categorical(rows[static_cast<std::size_t>(i)], rng);
    } else if (kind == "markov-grid") {
        int prev = draw_categorical(init_dist, rng);
        out[0] = prev;
        for (int i = 1; i < M; ++i) {
            prev = draw_categorical(transition[static_cast<std::size_t>(prev)], rng);
            out[static_cast<std::size_t>(i)] = prev;
        }
    } else {
        const int t = rng.uniform_int(static_cast<int>(templates.size()));
        for (int i = 0; i < M; ++i) {
            if (rng.uniform() < corrupt)
                out[static_cast<std::size_t>(i)] = rng.uniform_int(K);
            else
                out[static_cast<std::size_t>(i)] = templates[static_cast<std::size_t>(t)]
                                                            [static_cast<std::size_t>(i)];
        }
    }
    return out;
}

double SyntheticSpec::true_logprob(std::span<const int> tokens) const {
    if (static_cast<int>(tokens.size()) != M)
        throw ContractError("true_logprob: sequence length != M");
    for (int id : tokens)
        if (id < 0 || id >= K)
            throw IndexError("true_logprob: token " + std::to_string(id) + " outside [0, K)");
    if (kind == "factorized") {
        double lp = 0.0;
        for (int i = 0; i < M; ++i) {
            const double p = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(tokens[i])];
            if (p <= 0.0) return kNegInf;
            lp += std::log(p);
        }
        return lp;
    }
    if (kind == "markov-grid") {
        double p0 = init_dist[static_cast<std::size_t>(tokens[0])];
        if (p0 <= 0.0) return kNegInf;
        double lp = std::log(p0);
        for (int i = 1; i < M; ++i) {
            const double p = transition[static_cast<std::size_t>(tokens[i - 1])]
                                       [static_cast<std::size_t>(tokens[i])];
            if (p <= 0.0) return kNegInf;
            lp += std::log(p);
        }
        return lp;
    }
    // template-mixture: average over templates of the product likelihood.
    double total = 0.0;
    const double unif = corrupt / K;
    for (const auto& t : templates) {
        double prod = 1.0;
        for (int i = 0; i < M; ++i) {
            const double match = t[static_cast<std::size_t>(i)] == tokens[i] ? 1.0 - corrupt : 0.0;
            prod *= match + unif;
        }
        total += prod;
    }
    total /= static_cast<double>(templates.size());
    return total > 0.0 ? std::log(total) : kNegInf;
}

std::vector<std::vector<double>> SyntheticSpec::exact_marginals() const {
    std::vector<std::vector<double>> marg(static_cast<std::size_t>(M),
                                          std::vector<double>(static_cast<std::size_t>(K), 0.0));
    if (kind == "factorized") {
        marg = rows;
    } else if (kind == "markov-grid") {
        std::vector<double> cur = init_dist;
        marg[0] = cur;
        for (int i = 1; i < M; ++i) {
            std::vector<double> next(static_cast<std::size_t>(K), 0.0);
            for (int a = 0; a < K; ++a)
                for (int b = 0; b < K; ++b)
                    next[static_cast<std::size_t>(b)] +=
                        cur[static_cast<std::size_t>(a)] *
                        transition[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)];
            marg[static_cast<std::size_t>(i)] = next;
            cur = std::move(next);
        }
    } else {
        const double unif = corrupt / K;
        for (int i = 0; i < M; ++i) {
            for (const auto& t : templates) {
                for (int k = 0; k < K; ++k) {
                    const double match =
                        t[static_cast<std::size_t>(i)] == k ? 1.0 - corrupt : 0.0;
                    marg[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] +=
                        match + unif;
                }
            }
            for (int k = 0; k < K; ++k)
                marg[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)] /=
                    static_cast<double>(templates.size());
        }
    }
    return marg;
}

bool SyntheticSpec::enumerable(std::size_t limit) const {
    double total = 1.0;
    for (int i = 0; i < M; ++i) {
        total *= K;
        if (total > static_cast<double>(limit)) return false;
    }
    return true;
}

std::vector<int> gen_batch(const SyntheticSpec& spec, int batch, Rng& rng) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(batch) * spec.M);
    for (int b = 0; b < batch; ++b) {
        auto one = spec.sample_one(rng);
        out.insert(out.end(), one.begin(), one.end());
    }
    return out;
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size())
        throw ShapeError("tv_distance: length mismatch " + std::to_string(p.size()) + " vs " +
                         std::to_string(q.size()));
    double sp = 0.0, sq = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sp += p[i];
        sq += q[i];
        acc += std::abs(p[i] - q[i]);
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
        throw ContractError("tv_distance: inputs are not normalized");
    return 0.5 * acc;
}

}  // namespace vqlcmd
