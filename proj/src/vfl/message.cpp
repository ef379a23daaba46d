#include "icafs/vfl/message.hpp"

#include <bit>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace icafs::vfl {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv(std::uint64_t& h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xff;
    h *= kFnvPrime;
  }
}

}  // namespace

std::string party_name(int party) { return party == kServer ? "server" : "client" + std::to_string(party); }

std::string to_string(MessageKind k) {
  switch (k) {
    case MessageKind::batch_indices: return "BatchIndices";
    case MessageKind::embedding_up: return "EmbeddingUp";
    case MessageKind::synth_embedding_up: return "SynthEmbeddingUp";
    case MessageKind::feedback_down: return "FeedbackDown";
    case MessageKind::synth_feedback_down: return "SynthFeedbackDown";
    case MessageKind::synth_rows_up: return "SynthRowsUp";
    case MessageKind::synth_block_down: return "SynthBlockDown";
    case MessageKind::control_barrier: return "ControlBarrier";
  }
  return "?";
}

std::string to_string(PayloadTag t) {
  switch (t) {
    case PayloadTag::none: return "none";
    case PayloadTag::sample_ids: return "sample_ids";
    case PayloadTag::embeddings: return "embeddings";
    case PayloadTag::embedding_gradient: return "embedding_gradient";
    case PayloadTag::synthetic_rows: return "synthetic_rows";
    case PayloadTag::labels: return "labels";
    case PayloadTag::raw_features: return "raw_features";
    case PayloadTag::parameter_gradient: return "parameter_gradient";
    case PayloadTag::parameters: return "parameters";
  }
  return "?";
}

std::uint64_t Message::bytes() const {
  return static_cast<std::uint64_t>(payload.size()) * 8 + ids.size() * 8;
}

std::uint64_t Message::checksum() const {
  std::uint64_t h = kFnvOffset;
  fnv(h, static_cast<std::uint64_t>(payload.rows()));
  fnv(h, static_cast<std::uint64_t>(payload.cols()));
  for (Eigen::Index i = 0; i < payload.rows(); ++i)
    for (Eigen::Index j = 0; j < payload.cols(); ++j) fnv(h, std::bit_cast<std::uint64_t>(payload(i, j)));
  for (auto id : ids) fnv(h, static_cast<std::uint64_t>(id));
  return h;
}

void MessageLog::append(const Message& m) {
  records_.push_back({m.round, m.stage, m.sender, m.receiver, m.kind, m.tag, m.bytes(), m.checksum()});
  if (keep_payloads_) messages_.push_back(m);
}

std::uint64_t MessageLog::total_bytes() const {
  std::uint64_t n = 0;
  for (const auto& r : records_) n += r.bytes;
  return n;
}

std::map<std::string, std::uint64_t> MessageLog::bytes_by_kind() const {
  std::map<std::string, std::uint64_t> out;
  for (const auto& r : records_) out[to_string(r.kind)] += r.bytes;
  return out;
}

std::string MessageLog::to_ndjson() const {
  std::ostringstream os;
  for (const auto& r : records_) {
    nlohmann::ordered_json j;
    j["round"] = r.round;
    j["stage"] = r.stage;
    j["sender"] = party_name(r.sender);
    j["receiver"] = party_name(r.receiver);
    j["kind"] = to_string(r.kind);
    j["tag"] = to_string(r.tag);
    j["bytes"] = r.bytes;
    j["checksum"] = r.checksum;
    os << j.dump() << '\n';
  }
  return os.str();
}

void MessageLog::write_ndjson(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_ndjson();
}

std::size_t Bus::slot(int party) const {
  const std::size_t s = party == kServer ? outbox_.size() - 1 : static_cast<std::size_t>(party);
  if (party < kServer || s >= outbox_.size()) throw ProtocolError("unknown party " + std::to_string(party));
  return s;
}

void Bus::post(Message m) {
  slot(m.receiver);
  outbox_[slot(m.sender)].push_back(std::move(m));
}

std::vector<Message> Bus::barrier() {
  delivered_.clear();
  for (auto& box : outbox_) {
    for (auto& m : box) {
      if (log_) log_->append(m);
      delivered_.push_back(std::move(m));
    }
    box.clear();
  }
  return delivered_;
}

std::vector<Message> Bus::inbox(int receiver) const {
  std::vector<Message> out;
  for (const auto& m : delivered_) {
    if (m.receiver == receiver) out.push_back(m);
  }
  return out;
}

}  // namespace icafs::vfl
