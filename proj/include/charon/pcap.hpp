#pragma once

// Classic libpcap capture files (not pcapng). Both byte orders and the
// nanosecond-resolution magic are accepted on read; writes are little-endian
// microsecond files with LINKTYPE_ETHERNET.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "charon/core.hpp"

namespace charon {

class PcapError : public Error {
public:
  using Error::Error;
};

struct PcapRecord {
  std::uint32_t ts_sec = 0;
  std::uint32_t ts_frac = 0;  // microseconds, or nanoseconds for nanosecond files
  std::uint32_t orig_len = 0;
  std::vector<std::uint8_t> data;

  double timestamp(bool nanosecond) const {
    return ts_sec + ts_frac * (nanosecond ? 1e-9 : 1e-6);
  }
};

struct PcapFile {
  bool nanosecond = false;
  std::uint32_t linktype = 1;
  std::vector<PcapRecord> records;
};

namespace detail {

inline std::uint32_t pcap_u32(const unsigned char* p, bool swap) {
  std::uint32_t v = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
                    (std::uint32_t{p[3]} << 24);
  if (swap) v = __builtin_bswap32(v);
  return v;
}

inline void pcap_put32(std::ofstream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  os.write(b, 4);
}

}  // namespace detail

inline PcapFile read_pcap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PcapError("cannot open pcap file: " + path);
  unsigned char gh[24];
  if (!in.read(reinterpret_cast<char*>(gh), sizeof gh))
    throw PcapError(path + ": truncated pcap global header");

  PcapFile file;
  const std::uint32_t magic = detail::pcap_u32(gh, false);
  bool swap = false;
  switch (magic) {
    case 0xa1b2c3d4: break;
    case 0xa1b23c4d: file.nanosecond = true; break;
    case 0xd4c3b2a1: swap = true; break;
    case 0x4d3cb2a1: swap = true; file.nanosecond = true; break;
    default: throw PcapError(path + ": not a pcap file (bad magic)");
  }
  file.linktype = detail::pcap_u32(gh + 20, swap) & 0x0fffffff;
  if (file.linktype != 1) throw PcapError(path + ": unsupported link type " + std::to_string(file.linktype));

  std::size_t index = 0;
  for (;;) {
    unsigned char rh[16];
    in.read(reinterpret_cast<char*>(rh), sizeof rh);
    if (in.gcount() == 0) break;
    if (in.gcount() != sizeof rh)
      throw PcapError(path + ": truncated record header #" + std::to_string(index));
    PcapRecord rec;
    rec.ts_sec = detail::pcap_u32(rh, swap);
    rec.ts_frac = detail::pcap_u32(rh + 4, swap);
    const std::uint32_t incl = detail::pcap_u32(rh + 8, swap);
    rec.orig_len = detail::pcap_u32(rh + 12, swap);
    if (incl > (1u << 24)) throw PcapError(path + ": implausible record length");
    rec.data.resize(incl);
    if (!in.read(reinterpret_cast<char*>(rec.data.data()), incl))
      throw PcapError(path + ": truncated record #" + std::to_string(index));
    file.records.push_back(std::move(rec));
    ++index;
  }
  return file;
}

inline void write_pcap(const std::string& path, const std::vector<PcapRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PcapError("cannot create pcap file: " + path);
  detail::pcap_put32(os, 0xa1b2c3d4);
  const char version[4] = {2, 0, 4, 0};
  os.write(version, 4);
  detail::pcap_put32(os, 0);       // thiszone
  detail::pcap_put32(os, 0);       // sigfigs
  detail::pcap_put32(os, 65535);   // snaplen
  detail::pcap_put32(os, 1);       // LINKTYPE_ETHERNET
  for (const PcapRecord& r : records) {
    detail::pcap_put32(os, r.ts_sec);
    detail::pcap_put32(os, r.ts_frac);
    detail::pcap_put32(os, static_cast<std::uint32_t>(r.data.size()));
    detail::pcap_put32(os, r.orig_len ? r.orig_len : static_cast<std::uint32_t>(r.data.size()));
    os.write(reinterpret_cast<const char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
  }
  if (!os) throw PcapError("write failed: " + path);
}

}  // namespace charon
