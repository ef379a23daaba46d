#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "icafs/nn/tensor.hpp"

namespace icafs::vfl {

using nn::Matrix;

/// Party ids: clients are 0..K-1, the label-holding server is kServer.
constexpr int kServer = -1;

std::string party_name(int party);

enum class MessageKind {
  batch_indices,        // server -> client: sample ids of the round's batch
  embedding_up,         // client -> server: real z_k
  synth_embedding_up,   // client -> server: synthetic z~_k
  feedback_down,        // server -> client: dL/dz_k on real data
  synth_feedback_down,  // server -> client: dL/dz~_k on synthetic data
  synth_rows_up,        // client -> server: Stage-1 synthetic rows x~_k
  synth_block_down,     // server -> client: encoded global synthetic block for local decoding
  control_barrier,
};

/// What the payload contains, used by the audit policy.
enum class PayloadTag {
  none,
  sample_ids,
  embeddings,
  embedding_gradient,
  synthetic_rows,
  labels,
  raw_features,
  parameter_gradient,
  parameters,
};

std::string to_string(MessageKind k);
std::string to_string(PayloadTag t);

struct Message {
  int round = 0;
  int stage = 0;
  int sender = kServer;
  int receiver = kServer;
  MessageKind kind = MessageKind::control_barrier;
  PayloadTag tag = PayloadTag::none;
  Matrix payload;
  std::vector<std::int64_t> ids;  // sample ids the payload rows refer to

  std::uint64_t bytes() const;
  /// FNV-1a over the payload's values and ids.
  std::uint64_t checksum() const;
};

struct MessageRecord {
  int round = 0;
  int stage = 0;
  int sender = kServer;
  int receiver = kServer;
  MessageKind kind = MessageKind::control_barrier;
  PayloadTag tag = PayloadTag::none;
  std::uint64_t bytes = 0;
  std::uint64_t checksum = 0;
};

/**
 * Append-only record of every message. Payloads are optionally retained so an
 * audit can compare contents against private data.
 */
class MessageLog {
 public:
  explicit MessageLog(bool keep_payloads = false) : keep_payloads_(keep_payloads) {}

  void append(const Message& m);
  const std::vector<MessageRecord>& records() const { return records_; }
  /// Retained payloads, parallel to records() when keep_payloads is set.
  const std::vector<Message>& messages() const { return messages_; }
  bool keeps_payloads() const { return keep_payloads_; }
  std::uint64_t total_bytes() const;
  std::map<std::string, std::uint64_t> bytes_by_kind() const;

  /// One JSON object per line: round, stage, sender, receiver, kind, tag, bytes, checksum.
  void write_ndjson(const std::filesystem::path& path) const;
  std::string to_ndjson() const;

 private:
  bool keep_payloads_;
  std::vector<MessageRecord> records_;
  std::vector<Message> messages_;
};

/**
 * Per-party outboxes flushed into the log in fixed party order at each
 * barrier, so the log does not depend on thread scheduling.
 */
class Bus {
 public:
  Bus(int clients, MessageLog* log) : outbox_(static_cast<std::size_t>(clients) + 1), log_(log) {}

  /// Called by the sending party's worker only.
  void post(Message m);
  /// Delivers queued messages: clients 0..K-1 then the server, each in posting order.
  std::vector<Message> barrier();
  /// Messages addressed to a receiver from the last barrier.
  std::vector<Message> inbox(int receiver) const;

 private:
  std::size_t slot(int party) const;
  std::vector<std::vector<Message>> outbox_;
  std::vector<Message> delivered_;
  MessageLog* log_;
};

}  // namespace icafs::vfl
