// SPDX-License-Identifier: Apache-2.0
#include <map>
#include <string>
#include <vector>

#include "asrcl/corpus.hpp"
#include "asrcl/errors.hpp"

namespace asrcl {

namespace {

struct Intent {
  const char* scenario;
  const char* action;
  std::vector<const char*> templates;
};

const std::map<std::string, std::vector<const char*>>& slots() {
  static const std::map<std::string, std::vector<const char*>> s = {
      {"room", {"kitchen", "bedroom", "living room", "bathroom", "hallway", "office", "garage"}},
      {"light", {"light", "lights", "lamp", "lamps"}},
      {"device", {"fan", "heater", "plug", "coffee machine", "vacuum", "socket"}},
      {"genre", {"jazz", "rock", "pop", "classical", "country", "blues", "folk"}},
      {"artist", {"adele", "queen", "madonna", "coldplay", "beyonce", "eminem"}},
      {"city", {"london", "paris", "boston", "tokyo", "berlin", "madrid", "dublin"}},
      {"day", {"today", "tomorrow", "monday", "friday", "this weekend", "next week"}},
      {"time", {"six am", "seven thirty", "eight pm", "noon", "nine fifteen", "ten o'clock"}},
      {"person", {"john", "mary", "alex", "sarah", "tom", "my boss", "mom"}},
      {"topic", {"the meeting", "the report", "dinner", "the trip", "the budget"}},
  };
  return s;
}

const std::vector<Intent>& intents() {
  static const std::vector<Intent> v = {
      {"iot", "hue_lighton",
       {"turn on the {light} in the {room}", "switch on the {room} {light}", "please turn the {light} on",
        "can you turn on the {light}", "{light} on in the {room}"}},
      {"iot", "hue_lightoff",
       {"turn off the {light} in the {room}", "switch off the {room} {light}", "please turn the {light} off",
        "can you turn off the {light}", "{light} off in the {room}"}},
      {"iot", "wemo_on",
       {"turn on the {device}", "switch the {device} on", "start the {device} in the {room}",
        "please power on the {device}"}},
      {"iot", "wemo_off",
       {"turn off the {device}", "switch the {device} off", "stop the {device} in the {room}",
        "please power off the {device}"}},
      {"music", "play",
       {"play some {genre} music", "play songs by {artist}", "put on {genre} please",
        "i want to hear {artist}", "play the latest {artist} album"}},
      {"music", "volume_up",
       {"turn up the volume", "make the music louder", "increase the volume please",
        "louder please", "turn the {genre} up"}},
      {"weather", "query",
       {"what is the weather in {city} {day}", "will it rain {day}", "how hot is it in {city}",
        "do i need an umbrella {day}", "what is the forecast for {city}"}},
      {"alarm", "set",
       {"set an alarm for {time}", "wake me up at {time}", "set my alarm for {time} {day}",
        "please set an alarm at {time}"}},
      {"alarm", "remove",
       {"cancel my alarm for {time}", "delete the alarm at {time}", "remove my {time} alarm",
        "turn off the alarm for {day}"}},
      {"alarm", "query",
       {"what alarms do i have", "is there an alarm for {time}", "when is my alarm set {day}",
        "show my alarms for {day}"}},
      {"calendar", "set",
       {"add a meeting with {person} {day}", "schedule lunch with {person} at {time}",
        "put {topic} on my calendar {day}", "remind me about {topic} {day}"}},
      {"calendar", "query",
       {"what is on my calendar {day}", "do i have any meetings {day}", "when is {topic}",
        "am i free {day} at {time}"}},
      {"email", "sendemail",
       {"send an email to {person} about {topic}", "email {person} about {topic}",
        "write an email to {person}", "reply to {person} about {topic}"}},
      {"email", "query",
       {"check my email", "do i have new emails from {person}", "read my latest email",
        "any emails about {topic}"}},
      {"datetime", "query",
       {"what time is it in {city}", "what is the date {day}", "tell me the time in {city}",
        "what day is it {day}"}},
  };
  return v;
}

std::string fill(const std::string& tmpl, Rng& rng) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      const auto& options = slots().at(tmpl.substr(i + 1, close - i - 1));
      out += options[uniform_index(rng, options.size())];
      i = close + 1;
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

}  // namespace

std::vector<PairedExample> toy_corpus(const ToyCorpusConfig& cfg) {
  if (cfg.label_noise < 0.0 || cfg.label_noise >= 1.0) throw ConfigError("label_noise must be in [0, 1)");
  Rng rng(cfg.seed);
  // separate stream so the sentences do not depend on label_noise
  Rng label_rng(cfg.seed ^ 0x5bd1e995u);
  const auto& all = intents();
  std::vector<PairedExample> out;
  out.reserve(cfg.size);
  for (std::size_t i = 0; i < cfg.size; ++i) {
    const std::size_t k = uniform_index(rng, all.size());
    const Intent& intent = all[k];
    PairedExample ex;
    ex.id = "toy-" + std::to_string(i);
    ex.clean = fill(intent.templates[uniform_index(rng, intent.templates.size())], rng);
    ex.asr = ex.clean;
    const Intent* labeled = &intent;
    if (cfg.label_noise > 0.0 && uniform01(label_rng) < cfg.label_noise) {
      labeled = &all[(k + 1 + uniform_index(label_rng, all.size() - 1)) % all.size()];
    }
    ex.scenario = labeled->scenario;
    ex.action = labeled->action;
    ex.label = ex.scenario + "_" + ex.action;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<PairedExample> noisy_toy_corpus(const ToyCorpusConfig& cfg, double noise_median) {
  auto examples = toy_corpus(cfg);
  NoiseConfig nc;
  nc.target_wer_median = noise_median;
  nc.seed = cfg.seed;
  std::vector<std::string> corpus;
  corpus.reserve(examples.size());
  for (const auto& ex : examples) corpus.push_back(ex.clean);
  const NoiseChannel channel(corpus, nc);
  Rng rng(cfg.seed + 1);
  corrupt(examples, channel, rng);
  return examples;
}

}  // namespace asrcl
