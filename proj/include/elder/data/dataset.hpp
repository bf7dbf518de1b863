// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "elder/core/errors.hpp"

namespace elder {

// One knowledge edit with its rephrase sets. Training-split rephrases may be
// batched with the edit; eval rephrases are strictly held out.
struct EditRecord {
    std::string id;
    std::string group_label;
    std::string prompt;
    std::string target;
    std::vector<std::string> train_rephrases;
    std::vector<std::string> eval_rephrases;
};

// Inputs unrelated to any edit, used for the retention metric.
struct TaskInput {
    std::string prompt;
    std::string subject;
    std::string relation;
    std::string object;
};

struct TaskInputSet {
    std::vector<TaskInput> inputs;
};

struct LoadStats {
    std::size_t excluded_without_rephrase = 0;
    std::size_t deduplicated = 0;
};

namespace detail {

// 50/50 split of the on-disk rephrase list, eval taking the remainder so at
// least one eval rephrase always exists.
inline void split_rephrases(const std::vector<std::string>& all, EditRecord& rec) {
    const std::size_t n_train = all.size() / 2;
    rec.train_rephrases.assign(all.begin(), all.begin() + long(n_train));
    rec.eval_rephrases.assign(all.begin() + long(n_train), all.end());
}

inline EditRecord parse_record(const nlohmann::json& j, int lineno) {
    EditRecord rec;
    std::vector<std::string> rephrases;
    if (j.contains("prompt")) {
        // native schema: {id, group, prompt, target, rephrases:[...]}
        rec.id = j.value("id", "line" + std::to_string(lineno));
        rec.group_label = j.value("group", rec.id);
        rec.prompt = j.at("prompt").get<std::string>();
        rec.target = j.at("target").get<std::string>();
        for (const auto& r : j.value("rephrases", nlohmann::json::array()))
            rephrases.push_back(r.get<std::string>());
    } else if (j.contains("src")) {
        // ZsRE-style: src -> prompt, alt (or answers[0]) -> target, rephrase -> rephrases
        rec.id = j.value("id", "line" + std::to_string(lineno));
        rec.group_label = j.value("group", rec.id);
        rec.prompt = j.at("src").get<std::string>();
        if (j.contains("alt"))
            rec.target = j.at("alt").get<std::string>();
        else if (j.contains("answers") && !j.at("answers").empty())
            rec.target = j.at("answers")[0].get<std::string>();
        if (j.contains("rephrase")) {
            if (j.at("rephrase").is_array())
                for (const auto& r : j.at("rephrase")) rephrases.push_back(r.get<std::string>());
            else
                rephrases.push_back(j.at("rephrase").get<std::string>());
        }
    } else if (j.contains("requested_rewrite")) {
        // CounterFact-style: requested_rewrite.{prompt,subject,target_new.str},
        // paraphrase_prompts -> rephrases
        const auto& rw = j.at("requested_rewrite");
        rec.id = j.contains("case_id") ? "case" + j.at("case_id").dump()
                                       : "line" + std::to_string(lineno);
        std::string tmpl = rw.at("prompt").get<std::string>();
        std::string subject = rw.at("subject").get<std::string>();
        auto pos = tmpl.find("{}");
        rec.prompt = pos == std::string::npos ? tmpl : tmpl.replace(pos, 2, subject);
        rec.group_label = rec.id;
        rec.target = rw.at("target_new").at("str").get<std::string>();
        for (const auto& r : j.value("paraphrase_prompts", nlohmann::json::array()))
            rephrases.push_back(r.get<std::string>());
    } else {
        throw IoError("line " + std::to_string(lineno) + ": unrecognized edit record schema");
    }
    if (rec.prompt.empty() || rec.target.empty())
        throw IoError("line " + std::to_string(lineno) + ": record needs non-empty prompt and target");
    detail::split_rephrases(rephrases, rec);
    return rec;
}

} // namespace detail

// Line-delimited records; records without any rephrase are excluded (counted),
// duplicates by id are dropped keeping the first.
inline std::vector<EditRecord> load_edits(const std::string& path, LoadStats* stats = nullptr) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open edits file '" + path + "'");
    std::vector<EditRecord> out;
    std::set<std::string> seen_ids;
    LoadStats local;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw IoError("line " + std::to_string(lineno) + ": malformed JSON (" + e.what() + ")");
        }
        EditRecord rec = detail::parse_record(j, lineno);
        if (rec.train_rephrases.empty() && rec.eval_rephrases.empty()) {
            ++local.excluded_without_rephrase;
            continue;
        }
        if (!seen_ids.insert(rec.id).second) {
            ++local.deduplicated;
            continue;
        }
        out.push_back(std::move(rec));
    }
    if (stats != nullptr) *stats = local;
    return out;
}

inline void save_edits(const std::string& path, const std::vector<EditRecord>& edits) {
    namespace fs = std::filesystem;
    const fs::path tmp = path + ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw IoError("cannot write edits file '" + path + "'");
        for (const EditRecord& e : edits) {
            nlohmann::json j;
            j["id"] = e.id;
            j["group"] = e.group_label;
            j["prompt"] = e.prompt;
            j["target"] = e.target;
            std::vector<std::string> rephrases = e.train_rephrases;
            rephrases.insert(rephrases.end(), e.eval_rephrases.begin(), e.eval_rephrases.end());
            j["rephrases"] = rephrases;
            os << j.dump() << "\n";
        }
    }
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Synthetic world: subject-relation-object facts rendered through templates.
// ---------------------------------------------------------------------------

struct SynthResult {
    std::vector<EditRecord> edits;
    TaskInputSet tasks;
    std::vector<std::string> corpus; // pretraining text, facts with original objects
    // Prompts about edit subjects under relations that were never edited.
    // They share the task inputs' prompt structure without touching any task
    // subject, so an editor may use them as unlabeled background material.
    std::vector<std::string> background;
};

namespace synth {

struct Relation {
    std::string name;
    std::vector<std::string> objects;
};

inline const std::vector<Relation>& relations() {
    static const std::vector<Relation> r = {
        {"color", {"red", "blue", "green", "amber", "violet", "crimson", "teal", "ivory", "gold",
                   "silver", "indigo", "coral", "olive", "magenta", "slate", "plum"}},
        {"city", {"paris", "tokyo", "oslo", "cairo", "lima", "quito", "dakar", "hanoi", "riga",
                  "perth", "turin", "malmo", "kyoto", "adana", "varna", "tunis"}},
        {"food", {"bread", "rice", "soup", "cheese", "mango", "olives", "pasta", "beans", "corn",
                  "figs", "dates", "plums", "leeks", "kale", "trout", "honey"}},
        {"drink", {"tea", "coffee", "cider", "juice", "water", "cocoa", "mead", "soda", "milk",
                   "wine", "ale", "tonic", "punch", "nectar", "latte", "matcha"}},
        {"sport", {"chess", "rowing", "tennis", "judo", "golf", "rugby", "fencing", "skiing",
                   "diving", "boxing", "cycling", "archery", "curling", "sailing", "squash",
                   "polo"}},
        {"animal", {"otter", "lynx", "heron", "ibex", "tapir", "raven", "gecko", "bison", "stork",
                    "viper", "moose", "crane", "hare", "badger", "finch", "seal"}},
        {"metal", {"iron", "copper", "zinc", "tin", "nickel", "cobalt", "lead", "silver2", "chrome",
                   "brass", "steel", "bronze", "titanium", "tungsten", "gallium", "sodium"}},
        {"tool", {"hammer", "wrench", "chisel", "plane", "saw", "drill", "file2", "clamp", "awl",
                  "pliers", "lathe", "rasp", "anvil", "vise", "level", "gauge"}},
    };
    return r;
}

// Pronounceable unique subject names.
inline std::vector<std::string> make_subjects(std::size_t count, std::mt19937_64& rng) {
    static const char* cons[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
    static const char* vows[] = {"a", "e", "i", "o", "u"};
    std::set<std::string> seen;
    std::vector<std::string> out;
    std::uniform_int_distribution<int> dc(0, 13), dv(0, 4);
    while (out.size() < count) {
        std::string name;
        for (int s = 0; s < 3; ++s) {
            name += cons[dc(rng)];
            name += vows[dv(rng)];
        }
        if (seen.insert(name).second) out.push_back(name);
    }
    return out;
}

inline std::string render(int tmpl, const std::string& rel, const std::string& subj) {
    switch (tmpl) {
        case 0: return "the " + rel + " of " + subj + " is";
        case 1: return "what is the " + rel + " of " + subj;
        case 2: return "tell me the " + rel + " of " + subj;
        case 3: return "for " + subj + " the " + rel + " is";
        case 4: return "the " + rel + " that " + subj + " has is";
        case 5: return "everyone knows the " + rel + " of " + subj + " is";
        case 6: return subj + " has a " + rel + " and it is";
        case 7: return "speaking of " + subj + " its " + rel + " is";
        case 8: return "the " + rel + " belonging to " + subj + " is";
        default: throw ContractError("unknown template index");
    }
}

inline constexpr int kTemplateCount = 9;

} // namespace synth

// Generates n edits (counterfactual targets over pretrained facts), a disjoint
// task-input set, and the pretraining corpus stating every original fact.
inline SynthResult synthesize_edits(std::size_t n_edits, std::size_t n_tasks, std::mt19937_64& rng) {
    if (n_edits < 1) throw DegenerateInputError("synthesize_edits: need at least one edit");
    const auto& rels = synth::relations();
    SynthResult out;
    const std::vector<std::string> subjects = synth::make_subjects(n_edits + n_tasks, rng);

    auto pick_object = [&rng](const synth::Relation& rel, int exclude) {
        std::uniform_int_distribution<int> d(0, int(rel.objects.size()) - 1);
        int o = d(rng);
        while (o == exclude) o = d(rng);
        return o;
    };

    // Edits and tasks draw from disjoint relation sets (and disjoint subjects),
    // so task inputs are unrelated to every edit.
    const std::size_t n_task_rels = 2;
    const std::size_t n_edit_rels = rels.size() - n_task_rels;
    for (std::size_t i = 0; i < n_edits + n_tasks; ++i) {
        const std::string& subj = subjects[i];
        const synth::Relation& rel =
            i < n_edits ? rels[i % n_edit_rels] : rels[n_edit_rels + i % n_task_rels];
        std::uniform_int_distribution<int> d(0, int(rel.objects.size()) - 1);
        const int o_true = d(rng);
        // The base model learns the original fact through every template.
        for (int t = 0; t < synth::kTemplateCount; ++t)
            out.corpus.push_back(synth::render(t, rel.name, subj) + " " + rel.objects[std::size_t(o_true)]);
        if (i < n_edits) {
            // Same subject, different relations: two from the task-side pool,
            // two from the edit-side pool, none ever edited for this subject.
            const synth::Relation* bgs[4] = {
                &rels[n_edit_rels + i % n_task_rels],
                &rels[n_edit_rels + (i + 1) % n_task_rels],
                &rels[(i + 3) % n_edit_rels],
                &rels[(i + 5) % n_edit_rels],
            };
            for (int b = 0; b < 4; ++b)
                out.background.push_back(
                    synth::render(int(i + 2 * b) % synth::kTemplateCount, bgs[b]->name, subj));
            const int o_new = pick_object(rel, o_true);
            EditRecord rec;
            rec.id = "e" + std::to_string(i);
            rec.group_label = subj + ":" + rel.name;
            rec.prompt = synth::render(0, rel.name, subj);
            rec.target = rel.objects[std::size_t(o_new)];
            std::vector<std::string> rephrases;
            for (int t = 1; t < synth::kTemplateCount; ++t)
                rephrases.push_back(synth::render(t, rel.name, subj));
            detail::split_rephrases(rephrases, rec);
            out.edits.push_back(std::move(rec));
        } else {
            TaskInput ti;
            ti.prompt = synth::render(0, rel.name, subj);
            ti.subject = subj;
            ti.relation = rel.name;
            ti.object = rel.objects[std::size_t(o_true)];
            out.tasks.inputs.push_back(std::move(ti));
        }
    }
    return out;
}

} // namespace elder
