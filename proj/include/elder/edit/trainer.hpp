// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "elder/core/adam.hpp"
#include "elder/core/rng.hpp"
#include "elder/data/dataset.hpp"
#include "elder/data/encode.hpp"
#include "elder/edit/allocation.hpp"
#include "elder/edit/deferral.hpp"
#include "elder/edit/losses.hpp"
#include "elder/eval/metrics.hpp"
#include "elder/model/config.hpp"
#include "elder/model/transformer.hpp"

namespace elder {

struct EditOutcome {
    std::string edit_id;
    double final_loss = 0.0;
    // Router top-k on the edit prompt equals the assigned allocation after training.
    bool routing_matches_assignment = false;
    std::size_t clamp_warnings = 0;
};

struct StreamCheckpoint {
    std::size_t edits_done = 0;
    MetricReport metrics;
};

struct StreamReport {
    std::vector<EditOutcome> outcomes;
    std::vector<StreamCheckpoint> checkpoints;
    std::uint64_t base_checksum_before = 0;
    std::uint64_t base_checksum_after = 0;
};

// Base-model language modelling on a fixed line corpus. Freezes the adapters,
// trains everything else, and re-freezes the base afterwards so the model is
// ready for editing.
template <class S>
double pretrain_lm(TransformerModel<S>& model, const Tokenizer& tok,
                   const std::vector<std::string>& corpus, int steps, int batch_size, double lr,
                   std::uint64_t seed, const std::function<void(int, double)>& on_step = {}) {
    if (corpus.empty()) throw DegenerateInputError("pretrain_lm: empty corpus");
    if (steps < 1 || batch_size < 1 || lr <= 0) throw ConfigError("pretrain_lm: bad schedule");
    std::vector<TokenSequence> lines;
    lines.reserve(corpus.size());
    for (const std::string& line : corpus) lines.push_back(make_lm_sequence(tok, line));

    model.set_adapters_trainable(false);
    model.set_base_trainable(true);
    AdamConfig acfg;
    acfg.learning_rate = lr;
    AdamState<S> adam(model.base_params(), acfg);
    auto rng = SeedStream(seed).stream("pretrain");
    std::uniform_int_distribution<std::size_t> pick_line(0, lines.size() - 1);

    double last = 0.0;
    std::vector<int> targets;
    std::vector<bool> mask;
    for (int step = 0; step < steps; ++step) {
        Tape<S> tape;
        Var acc{-1};
        for (int b = 0; b < batch_size; ++b) {
            const TokenSequence& seq = lines[pick_line(rng)];
            Var logits = model.forward(tape, seq, nullptr);
            model.lm_targets(seq, targets, mask);
            Var ce = cross_entropy(tape, logits, targets, mask);
            acc = acc.valid() ? add(tape, acc, ce) : ce;
        }
        Var loss = scale(tape, acc, S(1) / S(batch_size));
        last = double(tape.value(loss)(0, 0));
        tape.backward(loss);
        adam.step();
        if (on_step) on_step(step, last);
    }
    model.set_base_trainable(false);
    model.set_adapters_trainable(true);
    return last;
}

// Sequential editor: owns the allocation registry and the edit code store,
// trains one edit at a time against the frozen base.
template <class S>
class EditEngine {
public:
    EditEngine(TransformerModel<S>& model, const Tokenizer& tok, TrainSchedule sched,
               DeferralConfig dcfg, std::uint64_t seed)
        : model_(model),
          tok_(tok),
          sched_(sched),
          dcfg_(dcfg),
          registry_(model.config().moe_layer_count(), model.config().n_loras,
                    model.config().k_top, sched.sink_experts),
          store_(model.config().moe_layer_count(), model.config().n_loras, model.config().k_top),
          alloc_rng_(SeedStream(seed).stream("allocation")),
          replay_rng_(SeedStream(seed).stream("rehearsal")) {
        sched_.validate();
        model_.set_base_trainable(false);
        model_.set_adapters_trainable(true);
    }

    // Unlabeled background prompts (unrelated to any edit). Their routing is
    // trained toward the reserved sink adapters, whose code is maximally
    // distant from every stored edit code; without this every unrelated input
    // inherits the full allocation code of its nearest edit and deferral
    // never triggers.
    void set_background(const std::vector<std::string>& lines) {
        background_.clear();
        Tape<S> probe(/*grad_enabled=*/false);
        for (const std::string& line : lines) {
            TokenSequence seq = make_lm_sequence(tok_, line);
            seq.prompt_len = seq.length(); // query at the last prompt token
            background_.push_back(probe.value(model_.routing_query(probe, seq)));
        }
    }

    const TrainSchedule& schedule() const { return sched_; }
    const DeferralConfig& deferral_config() const { return dcfg_; }
    AllocationRegistry& registry() { return registry_; }
    EditCodeStore& store() { return store_; }
    const EditCodeStore& store() const { return store_; }

    EditOutcome train_edit(const EditRecord& edit) {
        audit(edit);
        const Allocation& alloc = registry_.assign(edit.group_label, alloc_rng_);

        // Training pool: the prompt plus the training-split rephrases, all
        // completed with the new target.
        std::vector<TokenSequence> pool;
        pool.push_back(make_sequence(tok_, edit.prompt, edit.target));
        for (const std::string& r : edit.train_rephrases)
            pool.push_back(make_sequence(tok_, r, edit.target));

        // Cache the residual stream ahead of the first mixture block for every
        // pool sequence; the blocks producing it are frozen, so one probe pass
        // serves every optimizer step. The routing queries (one row of the
        // same prefix) feed the rehearsal set, registered before the training
        // loop so the current edit benefits from the noise augmentation
        // alongside the earlier ones.
        std::vector<MatX<S>> prefixes;
        prefixes.reserve(pool.size());
        const std::size_t fresh = rehearsal_.size();
        {
            Tape<S> probe(/*grad_enabled=*/false);
            for (const TokenSequence& seq : pool) {
                BlockPrefix pf;
                RoutingContext<S> ctx = model_.route_sequence(probe, seq, &pf);
                prefixes.push_back(probe.value(pf.x));
                if (sched_.replay && sched_.aux_mode == AuxLossMode::guided) {
                    const int qpos =
                        std::min(seq.prompt_len, seq.real_length(TransformerModel<S>::kPadId)) - 1;
                    rehearsal_.push_back(
                        RehearsalItem{prefixes.back().row(qpos), alloc});
                }
            }
        }

        // Fresh optimizer state per edit: no moment leakage between edits.
        // Under guided allocation the routers train exclusively in the
        // refinement phase, so the in-loop optimizer owns the LoRA factors
        // only and adapter training never perturbs the routing map.
        AdamConfig acfg;
        acfg.learning_rate = sched_.learning_rate;
        std::vector<Parameter<S>*> aparams;
        for (Parameter<S>* p : model_.adapter_params())
            if (sched_.aux_mode != AuxLossMode::guided ||
                p->name.find(".router") == std::string::npos)
                aparams.push_back(p);
        AdamState<S> adam(aparams, acfg);

        EditOutcome out;
        out.edit_id = edit.id;
        std::vector<int> targets;
        std::vector<bool> mask;
        for (int step = 0; step < sched_.steps_per_edit; ++step) {
            Tape<S> tape;
            std::vector<RoutingContext<S>> ctxs;
            ctxs.reserve(std::size_t(sched_.batch_size));
            Var model_acc{-1};
            // Trailing batch slots revisit random earlier edits so their
            // adapters are maintained while the current edit trains.
            const int n_revisit =
                sched_.replay && !history_.empty()
                    ? std::min(sched_.replay_slots, sched_.batch_size - 1)
                    : 0;
            for (int b = 0; b < sched_.batch_size; ++b) {
                const bool revisit = b >= sched_.batch_size - n_revisit;
                const TokenSequence* seq = nullptr;
                const MatX<S>* prefix_val = nullptr;
                const Allocation* target_alloc = &alloc;
                if (revisit) {
                    std::uniform_int_distribution<std::size_t> de(0, history_.size() - 1);
                    const HistoryItem& old = history_[de(replay_rng_)];
                    std::uniform_int_distribution<std::size_t> ds(0, old.pool.size() - 1);
                    const std::size_t s = ds(replay_rng_);
                    seq = &old.pool[s];
                    prefix_val = &old.prefixes[s];
                    target_alloc = &old.alloc;
                } else {
                    const std::size_t idx =
                        (std::size_t(step) * std::size_t(sched_.batch_size) + std::size_t(b)) %
                        pool.size();
                    seq = &pool[idx];
                    prefix_val = &prefixes[idx];
                }
                BlockPrefix prefix;
                RoutingContext<S> ctx = model_.route_from_prefix(tape, *prefix_val, *seq, &prefix);
                if (sched_.aux_mode == AuxLossMode::guided) {
                    // Teacher-forced selection: knowledge lands in the
                    // assigned LoRAs no matter where the routers currently
                    // point; the refinement phase brings the routing there.
                    for (std::size_t l = 0; l < ctx.layers.size(); ++l)
                        ctx.layers[l].selected = target_alloc->per_layer[l];
                }
                ctx.flag = 1;
                // Mixing weights stay constant in the delta path: the model
                // loss otherwise saturates the mixing softmax and locks later
                // edits out of their assigned adapters.
                ctx.detach_scores = true;
                Var logits = model_.forward(tape, *seq, &ctx, sched_.renormalize_topk, &prefix);
                model_.lm_targets(*seq, targets, mask);
                Var ce = cross_entropy(tape, logits, targets, mask);
                model_acc = model_acc.valid() ? add(tape, model_acc, ce) : ce;
                ctxs.push_back(std::move(ctx));
            }
            Var loss = scale(tape, model_acc, S(1) / S(sched_.batch_size));
            if (sched_.aux_mode == AuxLossMode::balancing) {
                std::vector<const RoutingContext<S>*> ptrs;
                for (const RoutingContext<S>& c : ctxs) ptrs.push_back(&c);
                loss = add(tape, loss, scale(tape, balancing_loss(tape, ptrs), S(sched_.lambda)));
            }
            out.final_loss = double(tape.value(loss)(0, 0));
            tape.backward(loss);
            adam.step();
            out.clamp_warnings += tape.clamp_warnings();
        }

        if (sched_.replay) history_.push_back(HistoryItem{pool, prefixes, alloc});
        if (sched_.aux_mode == AuxLossMode::guided) refine_router(fresh);

        // Under guided allocation, store the pre-assigned code: assigned codes
        // never touch the reserved sink indices, so a sunk unrelated input
        // sits at the maximum distance from the whole store even when an
        // individual edit trained poorly (storing the live routing instead
        // would let one half-sunk edit code match every sunk input). The
        // other aux modes have no meaningful assignment, so the live routing
        // code after training is the only code associated with the edit.
        Tape<S> probe(/*grad_enabled=*/false);
        RoutingContext<S> routed = model_.route_sequence(probe, pool.front());
        const AllocationCode live = code_of(routed, model_.config().n_loras);
        if (sched_.aux_mode == AuxLossMode::guided) {
            store_.append(edit.id, code_of(alloc, model_.config().n_loras));
        } else {
            store_.append(edit.id, live);
        }
        out.routing_matches_assignment = (live == code_of(alloc, model_.config().n_loras));
        return out;
    }

    StreamReport run_stream(const std::vector<EditRecord>& edits, const TaskInputSet& tasks,
                            const std::function<void(const StreamCheckpoint&)>& on_checkpoint = {},
                            const std::function<void(const EditOutcome&)>& on_edit = {}) {
        StreamReport rep;
        rep.base_checksum_before = model_.base_checksum();
        for (std::size_t i = 0; i < edits.size(); ++i) {
            EditOutcome out = train_edit(edits[i]);
            if (on_edit) on_edit(out);
            rep.outcomes.push_back(std::move(out));
            const bool due = (i + 1) % std::size_t(sched_.checkpoint_interval) == 0;
            if (due || i + 1 == edits.size()) {
                StreamCheckpoint cp;
                cp.edits_done = i + 1;
                const std::vector<EditRecord> done(edits.begin(), edits.begin() + long(i) + 1);
                cp.metrics = evaluate(model_, tok_, done, tasks, store_, dcfg_,
                                      sched_.renormalize_topk);
                if (on_checkpoint) on_checkpoint(cp);
                rep.checkpoints.push_back(std::move(cp));
            }
        }
        rep.base_checksum_after = model_.base_checksum();
        return rep;
    }

private:
    struct RehearsalItem {
        MatX<S> query; // 1 x d_model, frozen
        Allocation alloc;
    };

    struct HistoryItem {
        std::vector<TokenSequence> pool;
        // Residual stream ahead of the first mixture block per pool sequence;
        // frozen blocks produce it, so the cached value stays exact forever.
        std::vector<MatX<S>> prefixes;
        Allocation alloc;
    };

    std::vector<const RehearsalItem*> sample_rehearsal(std::size_t n) {
        std::uniform_int_distribution<std::size_t> d(0, rehearsal_.size() - 1);
        std::vector<const RehearsalItem*> items;
        items.reserve(n);
        for (std::size_t s = 0; s < n; ++s) items.push_back(&rehearsal_[d(replay_rng_)]);
        return items;
    }

    // Router-only refinement over the cached query set. A router pass is a
    // few matvecs, so large batches are cheap; this keeps the full allocation
    // map (all edits so far) converged after every edit. The loss is a sum of
    // margin hinges — a multiclass-SVM shape — so the optimizer is plain SGD
    // with weight decay: gradient-normalizing optimizers keep taking
    // full-size steps on rare conflicting constraints and thrash the map,
    // while gradient-proportional steps settle at the hinge boundary and the
    // decay keeps the logit scale bounded over long streams.
    // `fresh` is the index of the first rehearsal item of the current edit;
    // those items get a dedicated loss term weighted by lambda so acquisition
    // does not wait on batch sampling.
    void refine_router(std::size_t fresh) {
        if (rehearsal_.empty() || sched_.router_steps == 0) return;
        std::vector<Parameter<S>*> routers;
        for (auto& m : model_.mixtures()) routers.push_back(&m.router);
        const S lr = S(sched_.learning_rate * sched_.router_lr_scale);
        const S decay = S(1) - lr * S(sched_.router_weight_decay);
        std::vector<const RehearsalItem*> fresh_items;
        for (std::size_t i = fresh; i < rehearsal_.size(); ++i)
            fresh_items.push_back(&rehearsal_[i]);
        const std::size_t n = std::min(rehearsal_.size(), std::size_t(sched_.router_batch));
        for (int step = 0; step < sched_.router_steps; ++step) {
            Tape<S> tape;
            Var loss = hinge_loss(tape, sample_rehearsal(n));
            if (!fresh_items.empty()) {
                Var acq = hinge_loss(tape, fresh_items);
                loss = add(tape, loss, scale(tape, acq, S(sched_.lambda)));
            }
            Var bg = background_loss(tape, std::max<std::size_t>(1, n / 2));
            if (bg.valid())
                loss = add(tape, loss, scale(tape, bg, S(sched_.background_weight)));
            tape.backward(loss);
            for (Parameter<S>* p : routers) {
                if (!p->grad_active) continue;
                p->value = decay * p->value - lr * p->grad;
                p->grad.setZero();
                p->grad_active = false;
            }
        }
    }

    // Rows of `qb` whose margin hinge is active at any mixture layer, found
    // with a plain forward pass. Satisfied rows contribute zero loss and zero
    // gradient, so restricting the taped loss to this set is exact.
    std::vector<long> violated_rows(const MatX<S>& qb,
                                    const std::function<const std::vector<int>&(std::size_t, std::size_t)>& assigned) {
        auto& mixtures = model_.mixtures();
        std::vector<char> hit(std::size_t(qb.rows()), 0);
        for (std::size_t l = 0; l < mixtures.size(); ++l) {
            const MatX<S> logits = qb * mixtures[l].router.value.transpose();
            for (long i = 0; i < qb.rows(); ++i) {
                if (hit[std::size_t(i)]) continue;
                const std::vector<int>& a = assigned(std::size_t(i), l);
                S lo = std::numeric_limits<S>::infinity();
                for (int j : a) lo = std::min(lo, logits(i, j));
                S hi = -std::numeric_limits<S>::infinity();
                std::size_t next = 0;
                for (int j = 0; j < int(logits.cols()); ++j) {
                    if (next < a.size() && a[next] == j) { ++next; continue; }
                    hi = std::max(hi, logits(i, j));
                }
                if (hi > lo - S(sched_.router_margin)) hit[std::size_t(i)] = 1;
            }
        }
        std::vector<long> keep;
        for (long i = 0; i < qb.rows(); ++i)
            if (hit[std::size_t(i)]) keep.push_back(i);
        if (keep.empty()) keep.push_back(0); // zero-loss row: keeps the graph valid
        return keep;
    }

    // Margin objective on jittered cached queries: every assigned adapter's
    // logit must lead every competitor by router_margin. Satisfied queries
    // contribute no gradient, so converged edits stop fighting the background
    // regularizer and router logits stay bounded; the taped subgraph only
    // covers the rows whose hinge is active.
    Var hinge_loss(Tape<S>& tape, const std::vector<const RehearsalItem*>& items) {
        std::normal_distribution<double> gauss(0.0, 1.0);
        const auto d_model = items.front()->query.cols();
        MatX<S> qb(long(items.size()), d_model);
        for (std::size_t i = 0; i < items.size(); ++i) {
            qb.row(long(i)) = items[i]->query.row(0);
            if (sched_.replay_noise > 0) {
                const double sigma = sched_.replay_noise * double(items[i]->query.norm()) /
                                     std::sqrt(double(d_model));
                for (Eigen::Index c = 0; c < d_model; ++c)
                    qb(long(i), c) += S(sigma * gauss(replay_rng_));
            }
        }
        const std::vector<long> keep = violated_rows(
            qb, [&](std::size_t i, std::size_t l) -> const std::vector<int>& {
                return items[i]->alloc.per_layer[l];
            });
        MatX<S> qk(long(keep.size()), d_model);
        for (std::size_t i = 0; i < keep.size(); ++i) qk.row(long(i)) = qb.row(keep[i]);
        Var q = tape.constant(std::move(qk));
        Var acc{-1};
        auto& mixtures = model_.mixtures();
        std::vector<std::vector<int>> assigned(keep.size());
        for (std::size_t l = 0; l < mixtures.size(); ++l) {
            Var wr = tape.param(mixtures[l].router);
            Var logits = matmul(tape, q, transpose(tape, wr));
            for (std::size_t i = 0; i < keep.size(); ++i)
                assigned[i] = items[std::size_t(keep[i])]->alloc.per_layer[l];
            Var term = margin_hinge_rows(tape, logits, assigned, S(sched_.router_margin));
            acc = acc.valid() ? add(tape, acc, term) : term;
        }
        return scale(tape, acc, S(1) / S(items.size()));
    }

    // Margin objective steering a random batch of background queries into the
    // reserved sink adapters. Sunk inputs select only sink indices, which no
    // edit allocation ever contains, so their codes sit at the maximum Hamming
    // distance from the whole code store and the gate defers them.
    Var background_loss(Tape<S>& tape, std::size_t n) {
        if (background_.empty() || sched_.sink_experts < model_.config().k_top) return Var{-1};
        n = std::min(n, background_.size());
        std::uniform_int_distribution<std::size_t> d(0, background_.size() - 1);
        MatX<S> qb(long(n), background_.front().cols());
        for (std::size_t i = 0; i < n; ++i) qb.row(long(i)) = background_[d(replay_rng_)].row(0);
        std::vector<int> sink(std::size_t(sched_.sink_experts));
        for (int j = 0; j < sched_.sink_experts; ++j) sink[std::size_t(j)] = j;
        const std::vector<long> keep =
            violated_rows(qb, [&](std::size_t, std::size_t) -> const std::vector<int>& { return sink; });
        MatX<S> qk(long(keep.size()), qb.cols());
        for (std::size_t i = 0; i < keep.size(); ++i) qk.row(long(i)) = qb.row(keep[i]);
        Var q = tape.constant(std::move(qk));
        const std::vector<std::vector<int>> assigned(keep.size(), sink);
        Var acc{-1};
        auto& mixtures = model_.mixtures();
        for (std::size_t l = 0; l < mixtures.size(); ++l) {
            Var wr = tape.param(mixtures[l].router);
            Var logits = matmul(tape, q, transpose(tape, wr));
            Var term = margin_hinge_rows(tape, logits, assigned, S(sched_.router_margin));
            acc = acc.valid() ? add(tape, acc, term) : term;
        }
        return scale(tape, acc, S(1) / S(n));
    }

    // Dataset hygiene: the held-out rephrases must never appear on the
    // training side of the same edit.
    void audit(const EditRecord& edit) const {
        for (const std::string& r : edit.eval_rephrases) {
            if (r == edit.prompt)
                throw ContractError("edit '" + edit.id + "': eval rephrase equals the prompt");
            for (const std::string& t : edit.train_rephrases)
                if (r == t)
                    throw ContractError("edit '" + edit.id +
                                        "': eval rephrase leaks into the training set");
        }
    }

    TransformerModel<S>& model_;
    const Tokenizer& tok_;
    TrainSchedule sched_;
    DeferralConfig dcfg_;
    AllocationRegistry registry_;
    EditCodeStore store_;
    std::mt19937_64 alloc_rng_;
    std::mt19937_64 replay_rng_;
    std::vector<RehearsalItem> rehearsal_;
    std::vector<HistoryItem> history_;
    std::vector<MatX<S>> background_;
};

} // namespace elder
