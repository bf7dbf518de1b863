// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver: synthesize data, pretrain the base model, run a
// sequential edit stream, evaluate, check gradients, and inspect edit codes.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "elder/core/checkpoint.hpp"
#include "elder/core/finite_diff.hpp"
#include "elder/data/dataset.hpp"
#include "elder/data/encode.hpp"
#include "elder/edit/trainer.hpp"
#include "elder/eval/metrics.hpp"
#include "elder/model/config.hpp"
#include "elder/model/transformer.hpp"
#include "elder/text/tokenizer.hpp"

namespace fs = std::filesystem;
using namespace elder;

namespace {

std::uint64_t env_seed(std::uint64_t dflt) {
    const char* s = std::getenv("ELDER_SEED");
    return s == nullptr ? dflt : std::stoull(s);
}

std::string env_out(const std::string& dflt) {
    const char* s = std::getenv("ELDER_OUT");
    return s == nullptr ? dflt : std::string(s);
}

void write_model_config(const std::string& path, const ModelConfig& cfg) {
    const fs::path tmp = path + ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw IoError("cannot write model config '" + path + "'");
        os << "vocab_size = " << cfg.vocab_size << "\n"
           << "d_model = " << cfg.d_model << "\n"
           << "n_heads = " << cfg.n_heads << "\n"
           << "n_layers = " << cfg.n_layers << "\n"
           << "d_ffn = " << cfg.d_ffn << "\n"
           << "max_seq_len = " << cfg.max_seq_len << "\n"
           << "moe_first = " << cfg.moe_first << "\n"
           << "moe_last = " << cfg.moe_last << "\n"
           << "n_loras = " << cfg.n_loras << "\n"
           << "lora_rank = " << cfg.lora_rank << "\n"
           << "k_top = " << cfg.k_top << "\n"
           << "precision = " << (cfg.precision == Precision::f64 ? "f64" : "f32") << "\n"
           << "seed = " << cfg.seed << "\n";
    }
    fs::rename(tmp, path);
}

ModelConfig read_model_config(const std::string& path) {
    const KvConfig kv = KvConfig::from_file(path);
    ModelConfig cfg;
    cfg.vocab_size = int(kv.get_int("vocab_size", 0));
    cfg.d_model = int(kv.get_int("d_model", cfg.d_model));
    cfg.n_heads = int(kv.get_int("n_heads", cfg.n_heads));
    cfg.n_layers = int(kv.get_int("n_layers", cfg.n_layers));
    cfg.d_ffn = int(kv.get_int("d_ffn", cfg.d_ffn));
    cfg.max_seq_len = int(kv.get_int("max_seq_len", cfg.max_seq_len));
    cfg.moe_first = int(kv.get_int("moe_first", cfg.moe_first));
    cfg.moe_last = int(kv.get_int("moe_last", cfg.moe_last));
    cfg.n_loras = int(kv.get_int("n_loras", cfg.n_loras));
    cfg.lora_rank = int(kv.get_int("lora_rank", cfg.lora_rank));
    cfg.k_top = int(kv.get_int("k_top", cfg.k_top));
    const std::string prec = kv.get_str("precision", "f64");
    if (prec != "f64" && prec != "f32") throw ConfigError("unknown precision '" + prec + "'");
    cfg.precision = prec == "f64" ? Precision::f64 : Precision::f32;
    cfg.seed = std::uint64_t(kv.get_int("seed", 1234));
    cfg.validate();
    return cfg;
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

TaskInputSet load_tasks(const std::string& path) {
    TaskInputSet tasks;
    for (const std::string& line : read_lines(path)) {
        nlohmann::json j = nlohmann::json::parse(line);
        TaskInput t;
        t.prompt = j.at("prompt").get<std::string>();
        t.subject = j.value("subject", "");
        t.relation = j.value("relation", "");
        t.object = j.at("object").get<std::string>();
        tasks.inputs.push_back(std::move(t));
    }
    return tasks;
}

void save_tasks(const std::string& path, const TaskInputSet& tasks) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write tasks file '" + path + "'");
    for (const TaskInput& t : tasks.inputs) {
        nlohmann::json j;
        j["prompt"] = t.prompt;
        j["subject"] = t.subject;
        j["relation"] = t.relation;
        j["object"] = t.object;
        os << j.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Precision-dispatched command bodies.
// ---------------------------------------------------------------------------

struct PretrainArgs {
    std::string corpus, out;
    int steps = 2000, batch = 8;
    double lr = 1e-3;
    std::uint64_t seed = 1234;
    std::string precision = "f64";
    ModelConfig shape; // vocab_size filled from the tokenizer
};

template <class S>
int run_pretrain(const PretrainArgs& a) {
    const std::vector<std::string> corpus = read_lines(a.corpus);
    Tokenizer tok = Tokenizer::from_corpus(corpus);
    ModelConfig cfg = a.shape;
    cfg.vocab_size = tok.vocab_size();
    cfg.precision = a.precision == "f64" ? Precision::f64 : Precision::f32;
    cfg.seed = a.seed;
    cfg.validate();

    TransformerModel<S> model(cfg, SeedStream(cfg.seed));
    const double final_loss = pretrain_lm(
        model, tok, corpus, a.steps, a.batch, a.lr, a.seed, [&](int step, double loss) {
            if ((step + 1) % 100 == 0)
                std::cout << "step " << (step + 1) << "/" << a.steps << " loss " << loss << "\n";
        });

    fs::create_directories(a.out);
    tok.save((fs::path(a.out) / "vocab.tsv").string());
    write_model_config((fs::path(a.out) / "model.kv").string(), cfg);
    auto params = model.all_params();
    save_checkpoint((fs::path(a.out) / "model.ckpt").string(), params);
    std::cout << "pretrained " << corpus.size() << " lines, final loss " << final_loss
              << ", model written to " << a.out << "\n";
    return 0;
}

struct EditArgs {
    std::string model_dir, edits, tasks, background, out;
    TrainSchedule sched;
    DeferralConfig dcfg;
    std::uint64_t seed = 1234;
};

template <class S>
int run_edit(const EditArgs& a) {
    const ModelConfig cfg = read_model_config((fs::path(a.model_dir) / "model.kv").string());
    Tokenizer tok = Tokenizer::load((fs::path(a.model_dir) / "vocab.tsv").string());
    TransformerModel<S> model(cfg, SeedStream(cfg.seed));
    auto params = model.all_params();
    load_checkpoint((fs::path(a.model_dir) / "model.ckpt").string(), params);

    LoadStats stats;
    const std::vector<EditRecord> edits = load_edits(a.edits, &stats);
    if (stats.excluded_without_rephrase > 0)
        std::cout << "excluded " << stats.excluded_without_rephrase
                  << " records without rephrases\n";
    if (stats.deduplicated > 0) std::cout << "dropped " << stats.deduplicated << " duplicates\n";
    TaskInputSet tasks;
    if (!a.tasks.empty()) tasks = load_tasks(a.tasks);

    fs::create_directories(a.out);
    std::ofstream metrics_csv(fs::path(a.out) / "metrics.csv");
    metrics_csv << "edits_done,reliability,generalization,retention\n";
    std::ofstream events(fs::path(a.out) / "events.jsonl");

    EditEngine<S> engine(model, tok, a.sched, a.dcfg, a.seed);
    if (!a.background.empty()) engine.set_background(read_lines(a.background));
    StreamReport rep = engine.run_stream(
        edits, tasks,
        [&](const StreamCheckpoint& cp) {
            metrics_csv << cp.edits_done << ',' << cp.metrics.reliability << ','
                        << cp.metrics.generalization << ',' << cp.metrics.retention << "\n";
            metrics_csv.flush();
            std::cout << "after " << cp.edits_done << " edits: rel " << cp.metrics.reliability
                      << " gen " << cp.metrics.generalization << " ret " << cp.metrics.retention
                      << "\n";
        },
        [&](const EditOutcome& out) {
            nlohmann::json j;
            j["edit_id"] = out.edit_id;
            j["final_loss"] = out.final_loss;
            j["routing_matches_assignment"] = out.routing_matches_assignment;
            j["clamp_warnings"] = out.clamp_warnings;
            events << j.dump() << "\n";
        });

    engine.store().save((fs::path(a.out) / "codes.bin").string());
    tok.save((fs::path(a.out) / "vocab.tsv").string());
    write_model_config((fs::path(a.out) / "model.kv").string(), cfg);
    auto out_params = model.all_params();
    save_checkpoint((fs::path(a.out) / "model.ckpt").string(), out_params);

    if (rep.base_checksum_before != rep.base_checksum_after) {
        std::cerr << "error: base parameters changed during the edit stream\n";
        return 1;
    }
    std::size_t acquired = 0;
    for (const EditOutcome& o : rep.outcomes)
        if (o.routing_matches_assignment) ++acquired;
    std::cout << "routing acquisition " << acquired << "/" << rep.outcomes.size()
              << ", base checksum unchanged, artifacts in " << a.out << "\n";
    return 0;
}

struct EvalArgs {
    std::string model_dir, edits, tasks, codes;
    DeferralConfig dcfg;
    bool renormalize = false;
};

template <class S>
int run_eval(const EvalArgs& a) {
    const ModelConfig cfg = read_model_config((fs::path(a.model_dir) / "model.kv").string());
    Tokenizer tok = Tokenizer::load((fs::path(a.model_dir) / "vocab.tsv").string());
    TransformerModel<S> model(cfg, SeedStream(cfg.seed));
    auto params = model.all_params();
    load_checkpoint((fs::path(a.model_dir) / "model.ckpt").string(), params);

    const std::vector<EditRecord> edits = load_edits(a.edits);
    TaskInputSet tasks;
    if (!a.tasks.empty()) tasks = load_tasks(a.tasks);
    const std::string codes_path =
        a.codes.empty() ? (fs::path(a.model_dir) / "codes.bin").string() : a.codes;
    const EditCodeStore store = EditCodeStore::load(codes_path);

    const MetricReport rep = evaluate(model, tok, edits, tasks, store, a.dcfg);
    std::cout << "reliability " << rep.reliability << " (" << rep.n_edits << " edits)\n"
              << "generalization " << rep.generalization << " (" << rep.n_rephrases
              << " rephrases)\n"
              << "retention " << rep.retention << " (" << rep.n_tasks << " tasks)\n";
    return 0;
}

template <class S>
int run_gradcheck(std::uint64_t seed, double tolerance) {
    // Tiny model with every op on the path: attention, layer norm, gelu,
    // routed mixture, guided + model loss.
    ModelConfig cfg;
    cfg.vocab_size = 19;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 3;
    cfg.d_ffn = 12;
    cfg.max_seq_len = 8;
    cfg.moe_first = 2;
    cfg.moe_last = 3;
    cfg.n_loras = 3;
    cfg.lora_rank = 2;
    cfg.k_top = 2;
    cfg.seed = seed;
    TransformerModel<S> model(cfg, SeedStream(seed));
    // Non-zero B factors so the adapter path carries real gradients.
    auto bump = SeedStream(seed).stream("gradcheck");
    for (auto& mix : model.mixtures())
        for (auto& lp : mix.loras)
            lp.up.value = gaussian<S>(lp.up.value.rows(), lp.up.value.cols(), 0.05, bump);

    TokenSequence seq;
    seq.ids = {1, 5, 9, 13, 7, 11};
    seq.prompt_len = 4;
    Allocation alloc;
    alloc.per_layer = {{0, 2}, {1, 2}};
    std::vector<int> targets;
    std::vector<bool> mask;
    model.lm_targets(seq, targets, mask);

    auto loss_on_tape = [&](Tape<S>& tape) {
        RoutingContext<S> ctx = model.route_sequence(tape, seq);
        for (std::size_t l = 0; l < ctx.layers.size(); ++l)
            ctx.layers[l].selected = alloc.per_layer[l];
        ctx.flag = 1;
        Var logits = model.forward(tape, seq, &ctx);
        Var ce = cross_entropy(tape, logits, targets, mask);
        Var gl = guided_loss(tape, ctx, alloc);
        return add(tape, ce, scale(tape, gl, S(1e-2)));
    };

    auto params = model.all_params();
    const auto res = finite_difference_check<S>(
        params,
        [&]() {
            Tape<S> tape(/*grad_enabled=*/false);
            return tape.value(loss_on_tape(tape))(0, 0);
        },
        [&]() {
            Tape<S> tape;
            tape.backward(loss_on_tape(tape));
        });
    std::cout << "max relative error " << res.max_rel_error << " at " << res.worst_param << "["
              << res.worst_row << "," << res.worst_col << "]\n";
    const bool ok = res.max_rel_error < tolerance;
    std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (tolerance " << tolerance
              << ")\n";
    return ok ? 0 : 1;
}

int run_codes(const std::string& codes_path, const std::string& csv_out) {
    const EditCodeStore store = EditCodeStore::load(codes_path);
    if (csv_out.empty()) {
        store.dump_csv(std::cout);
    } else {
        std::ofstream os(csv_out);
        if (!os) throw IoError("cannot write '" + csv_out + "'");
        store.dump_csv(os);
    }
    std::cerr << store.size() << " codes, " << store.moe_layers() << " layers x "
              << store.n_loras() << " adapters\n";
    return 0;
}

int run_synth(std::size_t n_edits, std::size_t n_tasks, std::uint64_t seed,
              const std::string& out) {
    auto rng = SeedStream(seed).stream("synth");
    const SynthResult synth = synthesize_edits(n_edits, n_tasks, rng);
    fs::create_directories(out);
    save_edits((fs::path(out) / "edits.jsonl").string(), synth.edits);
    save_tasks((fs::path(out) / "tasks.jsonl").string(), synth.tasks);
    {
        std::ofstream os(fs::path(out) / "corpus.txt");
        if (!os) throw IoError("cannot write corpus");
        for (const std::string& line : synth.corpus) os << line << "\n";
    }
    {
        std::ofstream os(fs::path(out) / "background.txt");
        if (!os) throw IoError("cannot write background prompts");
        for (const std::string& line : synth.background) os << line << "\n";
    }
    std::cout << synth.edits.size() << " edits, " << synth.tasks.inputs.size() << " tasks, "
              << synth.corpus.size() << " corpus lines, " << synth.background.size()
              << " background prompts written to " << out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"lifelong model-editing engine"};
    app.require_subcommand(1);

    // synth
    auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic edit/task dataset");
    std::size_t synth_edits = 200, synth_tasks = 50;
    std::uint64_t synth_seed = env_seed(1234);
    std::string synth_out = env_out("data");
    synth_cmd->add_option("--edits", synth_edits, "number of edit records");
    synth_cmd->add_option("--tasks", synth_tasks, "number of unrelated task inputs");
    synth_cmd->add_option("--seed", synth_seed, "random seed");
    synth_cmd->add_option("--out", synth_out, "output directory");

    // pretrain
    auto* pre_cmd = app.add_subcommand("pretrain", "train the frozen base model on a corpus");
    PretrainArgs pre;
    pre.seed = env_seed(pre.seed);
    pre.out = env_out("model");
    pre_cmd->add_option("--corpus", pre.corpus, "corpus text file, one line per example")
        ->required();
    pre_cmd->add_option("--out", pre.out, "output model directory");
    pre_cmd->add_option("--steps", pre.steps, "optimizer steps");
    pre_cmd->add_option("--batch", pre.batch, "batch size");
    pre_cmd->add_option("--lr", pre.lr, "learning rate");
    pre_cmd->add_option("--seed", pre.seed, "random seed");
    pre_cmd->add_option("--precision", pre.precision, "f64 or f32")
        ->check(CLI::IsMember({"f64", "f32"}));
    pre_cmd->add_option("--d-model", pre.shape.d_model, "model width");
    pre_cmd->add_option("--n-heads", pre.shape.n_heads, "attention heads");
    pre_cmd->add_option("--n-layers", pre.shape.n_layers, "transformer blocks");
    pre_cmd->add_option("--d-ffn", pre.shape.d_ffn, "FFN width");
    pre_cmd->add_option("--max-seq-len", pre.shape.max_seq_len, "maximum sequence length");
    pre_cmd->add_option("--moe-first", pre.shape.moe_first, "first mixture block (1-based)");
    pre_cmd->add_option("--moe-last", pre.shape.moe_last, "last mixture block (1-based)");
    pre_cmd->add_option("--n-loras", pre.shape.n_loras, "adapters per mixture layer");
    pre_cmd->add_option("--lora-rank", pre.shape.lora_rank, "adapter rank");
    pre_cmd->add_option("--k-top", pre.shape.k_top, "adapters selected per layer");

    // edit
    auto* edit_cmd = app.add_subcommand("edit", "run a sequential edit stream");
    EditArgs ed;
    ed.seed = env_seed(ed.seed);
    ed.out = env_out("edited");
    std::string ed_aux = "guided";
    edit_cmd->add_option("--model", ed.model_dir, "pretrained model directory")->required();
    edit_cmd->add_option("--edits", ed.edits, "edits JSONL file")->required();
    edit_cmd->add_option("--tasks", ed.tasks, "task inputs JSONL file");
    edit_cmd->add_option("--background", ed.background,
                         "unlabeled background prompts for router regularization");
    edit_cmd->add_option("--background-weight", ed.sched.background_weight,
                         "weight of the background-sink regularizer");
    edit_cmd->add_option("--sink-experts", ed.sched.sink_experts,
                         "low-index adapters reserved as the background routing sink");
    edit_cmd->add_option("--out", ed.out, "output directory");
    edit_cmd->add_option("--steps", ed.sched.steps_per_edit, "optimizer steps per edit");
    edit_cmd->add_option("--batch", ed.sched.batch_size, "batch size");
    edit_cmd->add_option("--lr", ed.sched.learning_rate, "learning rate");
    edit_cmd->add_option("--lambda", ed.sched.lambda, "auxiliary loss weight");
    edit_cmd->add_option("--aux-mode", ed_aux, "guided, none, or balancing")
        ->check(CLI::IsMember({"guided", "none", "balancing"}));
    edit_cmd->add_flag("--renormalize-topk", ed.sched.renormalize_topk,
                       "renormalize selected scores to sum to 1");
    edit_cmd->add_flag("!--no-replay", ed.sched.replay, "disable rehearsal and batch replay");
    edit_cmd->add_option("--replay-noise", ed.sched.replay_noise,
                         "relative noise std-dev on rehearsed queries");
    edit_cmd->add_option("--replay-slots", ed.sched.replay_slots,
                         "batch slots revisiting earlier edits");
    edit_cmd->add_option("--router-lr-scale", ed.sched.router_lr_scale,
                         "learning-rate multiplier for router matrices");
    edit_cmd->add_option("--router-steps", ed.sched.router_steps,
                         "router-only refinement steps after each edit");
    edit_cmd->add_option("--router-batch", ed.sched.router_batch,
                         "cached queries per router refinement step");
    edit_cmd->add_option("--router-margin", ed.sched.router_margin,
                         "logit margin enforced by router refinement");
    edit_cmd->add_option("--router-weight-decay", ed.sched.router_weight_decay,
                         "L2 decay on routers during refinement");
    edit_cmd->add_option("--checkpoint-interval", ed.sched.checkpoint_interval,
                         "edits between metric checkpoints");
    edit_cmd->add_option("--epsilon", ed.dcfg.epsilon,
                         "deferral Hamming threshold (negative: layers * k_top)");
    edit_cmd->add_option("--seed", ed.seed, "random seed");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate an edited model");
    EvalArgs ev;
    eval_cmd->add_option("--model", ev.model_dir, "edited model directory")->required();
    eval_cmd->add_option("--edits", ev.edits, "edits JSONL file")->required();
    eval_cmd->add_option("--tasks", ev.tasks, "task inputs JSONL file");
    eval_cmd->add_option("--codes", ev.codes, "edit code store (default: model dir)");
    eval_cmd->add_option("--epsilon", ev.dcfg.epsilon, "deferral Hamming threshold");
    eval_cmd->add_flag("--renormalize-topk", ev.renormalize, "renormalize selected scores");

    // gradcheck
    auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
    std::uint64_t gc_seed = env_seed(7);
    double gc_tol = 1e-4;
    std::string gc_prec = "f64";
    gc_cmd->add_option("--seed", gc_seed, "random seed");
    gc_cmd->add_option("--tolerance", gc_tol, "max allowed relative error");
    gc_cmd->add_option("--precision", gc_prec, "f64 or f32")
        ->check(CLI::IsMember({"f64", "f32"}));

    // codes
    auto* codes_cmd = app.add_subcommand("codes", "dump an edit code store as CSV");
    std::string codes_path, codes_csv;
    codes_cmd->add_option("--codes", codes_path, "edit code store file")->required();
    codes_cmd->add_option("--csv", codes_csv, "write CSV here instead of stdout");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*synth_cmd) return run_synth(synth_edits, synth_tasks, synth_seed, synth_out);
        if (*pre_cmd)
            return pre.precision == "f32" ? run_pretrain<float>(pre) : run_pretrain<double>(pre);
        if (*edit_cmd) {
            ed.sched.aux_mode = aux_mode_from_string(ed_aux);
            const ModelConfig cfg =
                read_model_config((fs::path(ed.model_dir) / "model.kv").string());
            return cfg.precision == Precision::f32 ? run_edit<float>(ed) : run_edit<double>(ed);
        }
        if (*eval_cmd) {
            const ModelConfig cfg =
                read_model_config((fs::path(ev.model_dir) / "model.kv").string());
            return cfg.precision == Precision::f32 ? run_eval<float>(ev) : run_eval<double>(ev);
        }
        if (*gc_cmd)
            return gc_prec == "f32" ? run_gradcheck<float>(gc_seed, gc_tol)
                                    : run_gradcheck<double>(gc_seed, gc_tol);
        if (*codes_cmd) return run_codes(codes_path, codes_csv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
