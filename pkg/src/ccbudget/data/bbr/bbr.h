/*++

    Simplified BBR congestion controller state, laid out after a production
    QUIC stack so that update-block patches have realistic targets.

--*/

#pragma once

#include <stdint.h>

#define BBR_PACING_CYCLE_LENGTH 8

typedef int BOOLEAN;

typedef struct BBR_BANDWIDTH_FILTER {

    //
    // Bandwidth samples over the last few round trips, bytes per second.
    //
    uint64_t Samples[3];

    BOOLEAN AppLimited;

    uint64_t AppLimitedExitTarget;

} BBR_BANDWIDTH_FILTER;

typedef struct QUIC_CONGESTION_CONTROL_BBR {

    //
    // Whether the bottleneck bandwidth has been detected.
    //
    BOOLEAN BtlbwFound : 1;

    BOOLEAN ExitingQuiescence : 1;

    BOOLEAN EndOfRecoveryValid : 1;

    BOOLEAN MinRttTimestampValid : 1;

    BOOLEAN RttSampleExpired : 1;

    uint32_t InitialCongestionWindowPackets;

    uint32_t CongestionWindow;

    uint32_t InitialCongestionWindow;

    uint32_t RecoveryWindow;

    uint32_t BytesInFlight;

    uint32_t BytesInFlightMax;

    uint8_t Exemptions;

    uint64_t RoundTripCounter;

    uint32_t CwndGain;

    uint32_t PacingGain;

    uint64_t SendQuantum;

    uint8_t SlowStartupRoundCounter;

    uint32_t PacingCycleIndex;

    uint64_t AggregatedAckBytes;

    uint32_t RecoveryState;

    uint32_t BbrState;

    uint64_t MinRtt;

    uint64_t LastEstimatedStartupBandwidth;

    //
    // BBR estimates maximum bandwidth by the maximum recent bandwidth
    //
    BBR_BANDWIDTH_FILTER BandwidthFilter;

} QUIC_CONGESTION_CONTROL_BBR;

typedef struct QUIC_CONGESTION_CONTROL {
    const char* Name;
    QUIC_CONGESTION_CONTROL_BBR Bbr;
} QUIC_CONGESTION_CONTROL;

typedef struct QUIC_LOSS_EVENT {
    uint64_t LargestPacketNumberLost;
    uint64_t LargestSentPacketNumber;
    uint32_t NumRetransmittableBytes;
    BOOLEAN PersistentCongestion : 1;
} QUIC_LOSS_EVENT;

void
BbrCongestionControlInitialize(
    QUIC_CONGESTION_CONTROL* Cc,
    uint32_t DatagramPayloadLength
    );
