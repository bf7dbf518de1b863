// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "elder/data/dataset.hpp"
#include "elder/data/encode.hpp"
#include "elder/edit/deferral.hpp"
#include "elder/model/transformer.hpp"
#include "elder/text/tokenizer.hpp"

namespace elder {

struct MetricReport {
    double reliability = 0.0;
    double generalization = 0.0;
    double retention = 0.0;
    std::size_t n_edits = 0;
    std::size_t n_rephrases = 0;
    std::size_t n_tasks = 0;
};

// Fraction of edit prompts whose greedy decode reproduces the new target,
// running the full deferral-gated inference path.
template <class S>
double reliability(TransformerModel<S>& model, const Tokenizer& tok,
                   const std::vector<EditRecord>& edits, const EditCodeStore& store,
                   const DeferralConfig& cfg, bool renormalize_topk = false) {
    if (edits.empty()) throw DegenerateInputError("reliability: no edits");
    std::size_t ok = 0;
    for (const EditRecord& e : edits) {
        const TokenSequence seq = make_sequence(tok, e.prompt, e.target);
        auto [logits, dec] = infer_with_deferral(model, seq, store, cfg, renormalize_topk);
        if (model.greedy_decode_target(logits, seq)) ++ok;
    }
    return double(ok) / double(edits.size());
}

// Same decode check over the held-out rephrases of every edit.
template <class S>
double generalization(TransformerModel<S>& model, const Tokenizer& tok,
                      const std::vector<EditRecord>& edits, const EditCodeStore& store,
                      const DeferralConfig& cfg, bool renormalize_topk = false) {
    std::size_t ok = 0, total = 0;
    for (const EditRecord& e : edits) {
        for (const std::string& r : e.eval_rephrases) {
            const TokenSequence seq = make_sequence(tok, r, e.target);
            auto [logits, dec] = infer_with_deferral(model, seq, store, cfg, renormalize_topk);
            ++total;
            if (model.greedy_decode_target(logits, seq)) ++ok;
        }
    }
    if (total == 0) throw DegenerateInputError("generalization: no held-out rephrases");
    return double(ok) / double(total);
}

// Fraction of unrelated task inputs the gate routes to the frozen base
// (flag 0). A zero flag implies the output is bitwise the pre-edit output,
// so this is exactly the fraction of preserved task behavior.
template <class S>
double retention(TransformerModel<S>& model, const Tokenizer& tok, const TaskInputSet& tasks,
                 const EditCodeStore& store, const DeferralConfig& cfg,
                 bool renormalize_topk = false) {
    if (tasks.inputs.empty()) throw DegenerateInputError("retention: no task inputs");
    std::size_t preserved = 0;
    for (const TaskInput& t : tasks.inputs) {
        const TokenSequence seq = make_sequence(tok, t.prompt, t.object);
        auto [logits, dec] = infer_with_deferral(model, seq, store, cfg, renormalize_topk);
        if (dec.flag == 0) ++preserved;
    }
    return double(preserved) / double(tasks.inputs.size());
}

template <class S>
MetricReport evaluate(TransformerModel<S>& model, const Tokenizer& tok,
                      const std::vector<EditRecord>& edits, const TaskInputSet& tasks,
                      const EditCodeStore& store, const DeferralConfig& cfg,
                      bool renormalize_topk = false) {
    MetricReport rep;
    rep.n_edits = edits.size();
    for (const EditRecord& e : edits) rep.n_rephrases += e.eval_rephrases.size();
    rep.n_tasks = tasks.inputs.size();
    rep.reliability = reliability(model, tok, edits, store, cfg, renormalize_topk);
    rep.generalization = generalization(model, tok, edits, store, cfg, renormalize_topk);
    rep.retention = tasks.inputs.empty()
                        ? 0.0
                        : retention(model, tok, tasks, store, cfg, renormalize_topk);
    return rep;
}

} // namespace elder
